//! The mask proposal network: a half-width transformer that scores every
//! position of a sentence, the softmax over those scores, sequential
//! sampling without replacement, the likelihood-ratio weight and the
//! baseline-centred objective that trains the network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NllPick, Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Binder, ParamId, ParamStore};
use crate::tensor::{self, Tensor};
use crate::transformer::{pack, LayerParams, Pass, INIT_STD};

/// Per-position corruption applied to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "token", rename_all = "snake_case")]
pub enum CorruptionAction {
    Mask,
    Random(u32),
    Keep,
}

/// Which branch of the exploration mixture produced a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Uniform,
    Proposal,
}

/// Chosen positions plus everything needed to weight and audit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    /// Proposal probability of each position at draw time, before
    /// without-replacement renormalisation.
    pub raw_probs: Vec<f64>,
    /// Filled by corruption; empty until then.
    pub actions: Vec<CorruptionAction>,
    pub ratio: f64,
    pub clipped_ratio: f64,
    pub source: MaskSource,
}

impl MaskPlan {
    /// Uniform-branch plan whose positions all become `[MASK]`.
    pub fn pure_mask(positions: Vec<usize>, n: usize) -> Self {
        let k = positions.len();
        Self {
            raw_probs: vec![1.0 / n as f64; k],
            actions: vec![CorruptionAction::Mask; k],
            positions,
            ratio: 1.0,
            clipped_ratio: 1.0,
            source: MaskSource::Uniform,
        }
    }

    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &p in &self.positions {
            if p >= n {
                return Err(Error::Index {
                    what: "sentence",
                    index: p,
                    size: n,
                });
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Argument(format!("position {p} selected twice")));
            }
        }
        Ok(())
    }
}

/// Multinomial over the positions of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalDistribution(pub Vec<f64>);

impl ProposalDistribution {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalises non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Argument("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("all proposal weights are zero".into()));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `k` distinct positions one at a time, renormalising over the
/// positions not yet taken. Returns the positions in draw order and the raw
/// probability of each.
pub fn sample_positions<R: Rng + ?Sized>(
    dist: &ProposalDistribution,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = dist.len();
    if k > n {
        return Err(Error::Argument(format!(
            "cannot draw {k} distinct positions from {n}"
        )));
    }
    let p = dist.probs();
    let mut taken = vec![false; n];
    let mut positions = Vec::with_capacity(k);
    let mut raw = Vec::with_capacity(k);
    for _ in 0..k {
        let remaining: f64 = (0..n).filter(|&i| !taken[i]).map(|i| p[i]).sum();
        let u = rng.random::<f64>() * remaining;
        let mut acc = 0.0;
        let mut pick = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            acc += p[i];
            // remember the last eligible index with positive mass in case
            // rounding leaves `u` just above the running sum
            if p[i] > 0.0 {
                pick = Some(i);
            }
            if u < acc && p[i] > 0.0 {
                break;
            }
        }
        let i = match pick {
            Some(i) => i,
            // zero mass left: fall back to the first free slot
            None => (0..n).find(|&i| !taken[i]).expect("k <= n"),
        };
        taken[i] = true;
        positions.push(i);
        raw.push(p[i]);
    }
    Ok((positions, raw))
}

/// `r = (1/n)^K / prod(raw_probs)` and its clip to `[1-eps, 1+eps]`.
pub fn importance_ratio(raw_probs: &[f64], n: usize, k: usize, eps: f64) -> Result<(f64, f64)> {
    if raw_probs.len() != k {
        return Err(Error::Argument(format!(
            "{} probabilities for K={k}",
            raw_probs.len()
        )));
    }
    if let Some(p) = raw_probs.iter().find(|p| **p <= 0.0 || !p.is_finite()) {
        return Err(Error::Numeric(format!("proposal probability {p} is not positive")));
    }
    let u = 1.0 / n as f64;
    // factor-wise so that a uniform proposal cancels exactly
    let r: f64 = raw_probs.iter().map(|p| u / p).product();
    Ok((r, r.clamp(1.0 - eps, 1.0 + eps)))
}

/// Baseline-centred coefficients `loss_k - mean(loss)`.
pub fn mapnet_coefficients(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Argument("proposal objective needs K >= 1".into()));
    }
    let baseline = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(losses.iter().map(|l| l - baseline).collect())
}

/// Value of `sum_k -log p(pos_k) * (loss_k - baseline)`; losses are constants.
pub fn mapnet_loss(dist: &ProposalDistribution, plan: &MaskPlan, losses: &[f64]) -> Result<f64> {
    if losses.len() != plan.k() {
        return Err(Error::Argument(format!(
            "{} losses for {} positions",
            losses.len(),
            plan.k()
        )));
    }
    let coefs = mapnet_coefficients(losses)?;
    Ok(plan
        .positions
        .iter()
        .zip(coefs)
        .map(|(&pos, c)| -dist.probs()[pos].ln() * c)
        .sum())
}

/// Differentiable form of [`mapnet_loss`] on a `[1, n]` score row, scaled by
/// `scale`.
pub fn mapnet_objective(
    tape: &mut Tape,
    scores: Var,
    plan: &MaskPlan,
    losses: &[f64],
    scale: f64,
) -> Result<Var> {
    let coefs = mapnet_coefficients(losses)?;
    let picks: Vec<NllPick> = plan
        .positions
        .iter()
        .zip(coefs)
        .map(|(&col, c)| NllPick {
            row: 0,
            col,
            coef: c * scale,
        })
        .collect();
    tape.softmax_nll(scores, &picks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapNetConfig {
    pub input_width: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
}

impl MapNetConfig {
    /// Half the encoder's width and heads, same depth.
    pub fn half_of(enc: &EncoderConfig) -> Self {
        Self {
            input_width: enc.hidden_size,
            hidden_size: enc.hidden_size / 2,
            num_heads: (enc.num_heads / 2).max(1),
            num_layers: enc.num_layers,
            ffn_size: enc.hidden_size / 2 * enc.ffn_multiplier,
            max_seq_len: enc.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapNetParams {
    pub config: MapNetConfig,
    /// Same id as the encoder's token embedding.
    pub tok_emb: ParamId,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub score_w: ParamId,
    pub score_b: ParamId,
}

impl MapNetParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: MapNetConfig,
        tok_emb: ParamId,
        rng: &mut R,
    ) -> Self {
        let (h, w) = (config.hidden_size, config.input_width);
        let in_w = store.add("mapnet.in.w", normal_tensor(&[w, h], INIT_STD, rng));
        let in_b = store.add("mapnet.in.b", Tensor::zeros(&[h]));
        let pos_emb = store.add(
            "mapnet.pos_emb",
            normal_tensor(&[config.max_seq_len, h], INIT_STD, rng),
        );
        let emb_ln_g = store.add("mapnet.emb_ln.gamma", Tensor::filled(&[h], 1.0));
        let emb_ln_b = store.add("mapnet.emb_ln.beta", Tensor::zeros(&[h]));
        let layers = (0..config.num_layers)
            .map(|l| LayerParams::init(store, &format!("mapnet.layer{l}"), h, config.ffn_size, rng))
            .collect();
        let score_w = store.add("mapnet.score.w", normal_tensor(&[h, 1], INIT_STD, rng));
        let score_b = store.add("mapnet.score.b", Tensor::zeros(&[1]));
        Self {
            config,
            tok_emb,
            in_w,
            in_b,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            score_w,
            score_b,
        }
    }

    /// All parameters, shared embedding first.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb];
        v.extend(self.own_ids());
        v
    }

    /// Parameters that belong to the proposal net alone.
    pub fn own_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.in_w, self.in_b, self.pos_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            v.extend(l.ids());
        }
        v.extend([self.score_w, self.score_b]);
        v
    }

    /// One `[1, n]` score row per sentence. When `stop_embedding` is set the
    /// shared table enters the tape as a constant.
    pub fn score_rows(
        &self,
        pass: &mut Pass<'_>,
        sentences: &[&[u32]],
        stop_embedding: bool,
    ) -> Result<Vec<Var>> {
        if let Some(s) = sentences.iter().find(|s| s.len() > self.config.max_seq_len || s.is_empty()) {
            return Err(Error::Argument(format!(
                "sentence length {} outside 1..={}",
                s.len(),
                self.config.max_seq_len
            )));
        }
        let (ids, pos, segments) = pack(sentences);
        let table = if stop_embedding {
            pass.tape.leaf(pass.store.get(self.tok_emb).clone())?
        } else {
            pass.p(self.tok_emb)?
        };
        let e = pass.tape.embedding(table, &ids)?;
        let in_w = pass.p(self.in_w)?;
        let in_b = pass.p(self.in_b)?;
        let x = pass.tape.linear(e, in_w, in_b)?;
        let pt = pass.p(self.pos_emb)?;
        let pe = pass.tape.embedding(pt, &pos)?;
        let x = pass.tape.add(x, pe)?;
        let mut x = pass.layernorm(x, self.emb_ln_g, self.emb_ln_b)?;
        x = pass.drop(x)?;
        for layer in &self.layers {
            x = pass.block(layer, x, &segments, self.config.num_heads)?;
        }
        let scores = pass.linear(x, self.score_w, self.score_b)?;
        let mut rows = Vec::with_capacity(segments.len());
        for seg in &segments {
            let idx: Vec<usize> = (seg.start..seg.start + seg.len).collect();
            let g = pass.tape.gather_rows(scores, &idx)?;
            rows.push(pass.tape.reshape(g, vec![1, seg.len])?);
        }
        Ok(rows)
    }

    /// Softmax of the per-position scores.
    pub fn propose(&self, store: &ParamStore, x: &[u32]) -> Result<ProposalDistribution> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let mut pass = Pass {
            tape: &mut tape,
            binder: &mut binder,
            store,
            dropout: None,
        };
        let rows = self.score_rows(&mut pass, &[x], false)?;
        Ok(distribution_of(&tape, rows[0]))
    }
}

/// Proposal distribution held by a score row on `tape`.
pub fn distribution_of(tape: &Tape, scores: Var) -> ProposalDistribution {
    let mut p = tape.value(scores).data().to_vec();
    tensor::softmax_in_place(&mut p);
    ProposalDistribution(p)
}
