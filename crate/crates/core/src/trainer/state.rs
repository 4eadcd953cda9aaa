use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamHyper};
use super::config::{lr_at, LossForm, TrainConfig};
use crate::autodiff::Tape;
use crate::corpus::TokenSequence;
use crate::encoder::{EncoderConfig, EncoderParams, MlmExample};
use crate::error::{Error, Result};
use crate::mask_proposal::{distribution_of, mapnet_loss, mapnet_objective, MaskSource};
use crate::masking::{corrupt, explore_p, prop_mask, rand_mask};
use crate::model::Model;
use crate::params::{Binder, ParamId};
use crate::tensor::Tensor;
use crate::transformer::Pass;

/// Stream numbers under the run seed. Each source of randomness has its
/// own stream so changing one leaves the others untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Data = 1,
    Mask = 2,
    Corruption = 3,
    Explore = 4,
    Dropout = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub corruption: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            data: stream_rng(seed, Stream::Data),
            mask: stream_rng(seed, Stream::Mask),
            corruption: stream_rng(seed, Stream::Corruption),
            explore: stream_rng(seed, Stream::Explore),
            dropout: stream_rng(seed, Stream::Dropout),
        }
    }

    pub fn named(&self) -> [(&'static str, &ChaCha8Rng); 5] {
        [
            ("data", &self.data),
            ("mask", &self.mask),
            ("corruption", &self.corruption),
            ("explore", &self.explore),
            ("dropout", &self.dropout),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut ChaCha8Rng); 5] {
        [
            ("data", &mut self.data),
            ("mask", &mut self.mask),
            ("corruption", &mut self.corruption),
            ("explore", &mut self.explore),
            ("dropout", &mut self.dropout),
        ]
    }
}

/// Position in the shuffled epoch order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataCursor {
    pub order: Vec<usize>,
    pub next: usize,
}

impl DataCursor {
    /// Indices of the next batch. Epochs are full reshuffles; a batch may
    /// straddle two epochs.
    pub fn next_batch<R: Rng + ?Sized>(
        &mut self,
        corpus_len: usize,
        batch_size: usize,
        with_replacement: bool,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if corpus_len == 0 {
            return Err(Error::Argument("cannot draw batches from an empty corpus".into()));
        }
        if with_replacement {
            return Ok((0..batch_size).map(|_| rng.random_range(0..corpus_len)).collect());
        }
        if self.order.len() != corpus_len {
            self.order.clear();
            self.next = 0;
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.next >= self.order.len() {
                self.order = (0..corpus_len).collect();
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        Ok(out)
    }
}

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub encoder_updates: u64,
    pub mapnet_updates: u64,
    pub rngs: RngStreams,
    pub cursor: DataCursor,
}

impl TrainState {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config, &mut stream_rng(seed, Stream::Init))?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            adam,
            step: 0,
            encoder_updates: 0,
            mapnet_updates: 0,
            rngs: RngStreams::new(seed),
            cursor: DataCursor::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Ratio-weighted batch loss.
    pub encoder_loss: f64,
    pub raw_mlm_loss: f64,
    /// Mean proposal objective over the sentences it was applied to.
    pub mapnet_loss: f64,
    pub mean_ratio: f64,
    pub clip_active_fraction: f64,
    pub explore_p: f64,
    pub learning_rate: f64,
    pub encoder_grad_norm: f64,
    pub mapnet_grad_norm: f64,
    pub eval_loss: Option<f64>,
}

fn norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
}

fn grads_of(binder: &Binder, grads: &crate::autodiff::Gradients, model: &Model, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| binder.grad(grads, &model.store, id)).collect()
}

/// One joint update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[TokenSequence], config: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let b = batch.len() as f64;
    let step = state.step;
    let p = if config.baseline_uniform {
        1.0
    } else {
        explore_p(&config.schedule, step)
    };
    let lr = lr_at(config, step + 1);
    let model = &state.model;
    let vocab = model.config().vocab_size;

    let sources: Vec<MaskSource> = if config.baseline_uniform {
        vec![MaskSource::Uniform; batch.len()]
    } else {
        (0..batch.len())
            .map(|_| {
                if state.rngs.explore.random::<f64>() < p {
                    MaskSource::Uniform
                } else {
                    MaskSource::Proposal
                }
            })
            .collect()
    };
    let trains_mapnet = |s: MaskSource| s == MaskSource::Proposal || config.off_policy_mapnet;
    let scored: Vec<usize> = if config.baseline_uniform {
        Vec::new()
    } else {
        (0..batch.len()).filter(|&i| trains_mapnet(sources[i])).collect()
    };

    // Proposal scores, kept on their own tape for the objective below.
    let mut map_tape = Tape::new();
    let mut map_binder = Binder::new(&model.store);
    let rows = if scored.is_empty() {
        Vec::new()
    } else {
        let sentences: Vec<&[u32]> = scored.iter().map(|&i| batch[i].tokens()).collect();
        let mut pass = Pass {
            tape: &mut map_tape,
            binder: &mut map_binder,
            store: &model.store,
            dropout: None,
        };
        model.mapnet.score_rows(&mut pass, &sentences, config.freeze_shared_embedding)?
    };
    let row_of = |i: usize| scored.iter().position(|&j| j == i).map(|r| rows[r]);

    let mut plans = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for (i, x) in batch.iter().enumerate() {
        let mut plan = match sources[i] {
            MaskSource::Uniform => rand_mask(x, config.mask_rate, &mut state.rngs.mask)?,
            MaskSource::Proposal => {
                let dist = distribution_of(&map_tape, row_of(i).expect("proposal rows are scored"));
                prop_mask(&dist, config.mask_rate, config.eps_clip, &mut state.rngs.mask)?
            }
        };
        inputs.push(corrupt(x, &mut plan, vocab, &mut state.rngs.corruption)?);
        plans.push(plan);
    }

    // Encoder objective: mean over the batch of clipped ratio times
    // sentence loss.
    let enc_scale = match config.loss_form {
        LossForm::LambdaOnMapnet => 1.0,
        LossForm::LambdaOnEncoder => config.lambda,
    };
    let examples: Vec<MlmExample<'_>> = batch
        .iter()
        .zip(&inputs)
        .zip(&plans)
        .map(|((x, inp), plan)| MlmExample::new(&inp.0, &plan.positions, &x.0))
        .collect();
    let weights: Vec<f64> = plans.iter().map(|pl| enc_scale * pl.clipped_ratio / b).collect();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store);
    let out = {
        let mut pass = Pass {
            tape: &mut tape,
            binder: &mut binder,
            store: &model.store,
            dropout: if config.dropout > 0.0 {
                Some((config.dropout, &mut state.rngs.dropout))
            } else {
                None
            },
        };
        model.encoder.mlm_forward(&mut pass, &examples)?
    };
    let obj = EncoderParams::mlm_objective(&mut tape, &out, &examples, &weights, config.reduction)?
        .ok_or_else(|| Error::Argument("batch has no masked positions".into()))?;
    let grads = tape.backward(obj)?;
    let enc_ids = model.encoder.ids();
    let mut enc_grads = grads_of(&binder, &grads, model, &enc_ids);
    drop(grads);

    let sentence_losses: Vec<Vec<f64>> = out
        .losses
        .iter()
        .map(|ls| ls.iter().map(|l| l.loss).collect())
        .collect();
    let sent = |i: usize| config.reduction.combine(&sentence_losses[i]);
    let raw_mlm_loss = (0..batch.len()).map(sent).sum::<f64>() / b;
    let encoder_loss = (0..batch.len()).map(|i| plans[i].clipped_ratio * sent(i)).sum::<f64>() / b;
    let mean_ratio = plans.iter().map(|pl| pl.ratio).sum::<f64>() / b;
    let clip_active_fraction = plans.iter().filter(|pl| pl.ratio != pl.clipped_ratio).count() as f64 / b;
    let encoder_grad_norm = norm(&enc_grads);

    // Proposal objective on the scored sentences, losses held constant.
    let map_scale = match config.loss_form {
        LossForm::LambdaOnMapnet => config.lambda,
        LossForm::LambdaOnEncoder => 1.0,
    };
    let map_ids = model.mapnet.ids();
    let mut mapnet_loss_value = 0.0;
    let mut map_grads = None;
    if !scored.is_empty() {
        let c = scored.len() as f64;
        let mut total = None;
        for (r, &i) in scored.iter().enumerate() {
            let dist = distribution_of(&map_tape, rows[r]);
            mapnet_loss_value += mapnet_loss(&dist, &plans[i], &sentence_losses[i])? / c;
            let term = mapnet_objective(&mut map_tape, rows[r], &plans[i], &sentence_losses[i], map_scale / c)?;
            total = Some(match total {
                None => term,
                Some(t) => map_tape.add(t, term)?,
            });
        }
        if map_scale != 0.0 {
            let g = map_tape.backward(total.expect("scored is non-empty"))?;
            map_grads = Some(grads_of(&map_binder, &g, model, &map_ids));
        }
    }
    let mapnet_grad_norm = map_grads.as_deref().map_or(0.0, norm);

    let hyper = AdamHyper {
        lr,
        betas: config.adam_betas,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };
    if let Some(mg) = &map_grads {
        if !config.freeze_shared_embedding {
            // map_ids[0] and enc_ids[0] are both the shared table
            enc_grads[0].add_assign(&mg[0]);
        }
    }
    state.encoder_updates += 1;
    state.adam.step(&mut state.model.store, &enc_ids, &enc_grads, state.encoder_updates, hyper)?;
    if let Some(mut mg) = map_grads {
        mg.remove(0);
        state.mapnet_updates += 1;
        let own = state.model.mapnet.own_ids();
        state.adam.step(&mut state.model.store, &own, &mg, state.mapnet_updates, hyper)?;
    }
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        encoder_loss,
        raw_mlm_loss,
        mapnet_loss: mapnet_loss_value,
        mean_ratio,
        clip_active_fraction,
        explore_p: p,
        learning_rate: lr,
        encoder_grad_norm,
        mapnet_grad_norm,
        eval_loss: None,
    })
}
