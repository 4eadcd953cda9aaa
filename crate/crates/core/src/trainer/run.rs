use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::state::{train_step, StepMetrics, TrainState};
use crate::autodiff::Tape;
use crate::corpus::TokenSequence;
use crate::encoder::{pure_masked, MlmExample, Reduction};
use crate::error::{Error, Result};
use crate::mask_proposal::MaskPlan;
use crate::masking::rand_mask;
use crate::model::Model;
use crate::params::Binder;
use crate::transformer::Pass;

const EVAL_CHUNK: usize = 64;

/// Held-out sentences with masks fixed once, so every evaluation of every
/// run scores the same positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub sentences: Vec<TokenSequence>,
    pub plans: Vec<MaskPlan>,
    masked: Vec<TokenSequence>,
}

impl EvalSet {
    pub fn new(sentences: Vec<TokenSequence>, mask_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plans = sentences
            .iter()
            .map(|s| rand_mask(s, mask_rate, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let masked = sentences
            .iter()
            .zip(&plans)
            .map(|(s, p)| pure_masked(s, &p.positions))
            .collect();
        Ok(Self {
            sentences,
            plans,
            masked,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Mean sentence loss with every planned position set to `[MASK]`.
    pub fn loss(&self, model: &Model) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Argument("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for start in (0..self.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(self.len());
            let examples: Vec<MlmExample<'_>> = (start..end)
                .map(|i| MlmExample::new(&self.masked[i].0, &self.plans[i].positions, &self.sentences[i].0))
                .collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.store);
            let mut pass = Pass {
                tape: &mut tape,
                binder: &mut binder,
                store: &model.store,
                dropout: None,
            };
            let out = model.encoder.mlm_forward(&mut pass, &examples)?;
            for ls in &out.losses {
                let v: Vec<f64> = ls.iter().map(|l| l.loss).collect();
                total += Reduction::Mean.combine(&v);
            }
        }
        Ok(total / self.len() as f64)
    }
}

/// Where a run reports to and when it stops.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub eval: Option<&'a EvalSet>,
    /// JSON lines, one per step.
    pub metrics: Option<&'a mut dyn Write>,
    /// Periodic checkpoints land here as `step-<n>.mvar`.
    pub checkpoint_dir: Option<&'a Path>,
    /// Stop once this many steps have been taken in total.
    pub stop_at: Option<u64>,
    /// Stop at the first evaluation at or below this loss.
    pub stop_below: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<StepMetrics>,
    /// `(step, eval loss)`, starting with the state before this call when
    /// an evaluation set is given.
    pub eval_curve: Vec<(u64, f64)>,
}

impl RunSummary {
    pub fn final_eval(&self) -> Option<f64> {
        self.eval_curve.last().map(|e| e.1)
    }
}

/// Runs `train_step` until `total_steps`, drawing batches from `corpus`.
/// Resumes from whatever step `state` is at.
pub fn train(
    config: &TrainConfig,
    state: &mut TrainState,
    corpus: &[TokenSequence],
    mut opts: RunOptions<'_>,
) -> Result<RunSummary> {
    config.validate()?;
    let mut summary = RunSummary::default();
    let end = opts.stop_at.map_or(config.total_steps, |s| s.min(config.total_steps));
    if state.step >= end {
        return Ok(summary);
    }
    if let Some(eval) = opts.eval {
        summary.eval_curve.push((state.step, eval.loss(&state.model)?));
    }
    while state.step < end {
        let idx = state.cursor.next_batch(
            corpus.len(),
            config.batch_size,
            config.sample_with_replacement,
            &mut state.rngs.data,
        )?;
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let mut m = train_step(state, &batch, config)?;
        let mut reached = false;
        if let Some(eval) = opts.eval {
            if config.eval_interval > 0 && m.step % config.eval_interval == 0 {
                let l = eval.loss(&state.model)?;
                m.eval_loss = Some(l);
                summary.eval_curve.push((m.step, l));
                reached = opts.stop_below.is_some_and(|t| l <= t);
            }
        }
        if let Some(w) = opts.metrics.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialise");
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        summary.metrics.push(m);
        if let Some(dir) = opts.checkpoint_dir {
            if config.checkpoint_interval > 0 && state.step.is_multiple_of(config.checkpoint_interval) {
                crate::checkpoint::save(&dir.join(format!("step-{}.mvar", state.step)), state, config)?;
            }
        }
        if reached {
            break;
        }
    }
    Ok(summary)
}

/// First evaluated step whose loss is at or below `tau`.
pub fn steps_to_threshold(curve: &[(u64, f64)], tau: f64) -> Option<u64> {
    curve.iter().find(|(_, l)| *l <= tau).map(|(s, _)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_first_crossing() {
        let curve = [(0, 5.0), (200, 4.0), (400, 3.0), (600, 3.5), (800, 2.0)];
        assert_eq!(steps_to_threshold(&curve, 3.0), Some(400));
        assert_eq!(steps_to_threshold(&curve, 1.0), None);
        assert_eq!(steps_to_threshold(&curve, 9.0), Some(0));
    }
}
