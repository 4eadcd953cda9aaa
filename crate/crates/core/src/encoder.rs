//! Transformer encoder with a masked-token prediction head.
//!
//! The sentence loss is the mean of the per-position losses over the masked
//! positions ([`Reduction::Mean`]); [`Reduction::Sum`] is available for
//! comparison.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NllPick, Tape, Var};
use crate::corpus::{TokenSequence, MASK};
use crate::error::{Error, Result};
use crate::mask_proposal::MaskPlan;
use crate::model::Model;
use crate::params::{normal_tensor, Binder, ParamId, ParamStore};
use crate::tensor::{self, Tensor};
use crate::transformer::{pack, LayerParams, Pass, INIT_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
}

impl EncoderConfig {
    /// 2 layers, H=64, A=4, max length 32.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_seq_len: 32,
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_multiplier: 4,
        }
    }

    /// BERT-base geometry. Never exercised by the test suite.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_seq_len: 512,
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_multiplier: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.vocab_size <= crate::corpus::NUM_RESERVED {
            return bad("vocab_size", "must exceed the reserved tokens".into());
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(
                "num_heads",
                format!("hidden_size {} not divisible by {}", self.hidden_size, self.num_heads),
            );
        }
        if !self.hidden_size.is_multiple_of(2) || !self.num_heads.is_multiple_of(2) {
            return bad(
                "hidden_size",
                "hidden size and heads must be even so the proposal net can be half size".into(),
            );
        }
        if self.max_seq_len == 0 || self.num_layers == 0 || self.ffn_multiplier == 0 {
            return bad("max_seq_len", "sizes must be positive".into());
        }
        Ok(())
    }
}

/// How a sentence loss combines its per-position terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn combine(self, losses: &[f64]) -> f64 {
        if losses.is_empty() {
            return 0.0;
        }
        let s: f64 = losses.iter().sum();
        match self {
            Reduction::Mean => s / losses.len() as f64,
            Reduction::Sum => s,
        }
    }

    fn per_position(self, k: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / k as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionLoss {
    pub position: usize,
    pub loss: f64,
    /// Entropy of the predicted distribution.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// One masked sentence fed to [`EncoderParams::mlm_forward`].
#[derive(Debug, Clone)]
pub struct MlmExample<'a> {
    pub input: &'a [u32],
    pub positions: &'a [usize],
    pub targets: Vec<u32>,
}

impl<'a> MlmExample<'a> {
    pub fn new(input: &'a [u32], positions: &'a [usize], original: &[u32]) -> Self {
        Self {
            input,
            positions,
            targets: positions.iter().map(|&p| original[p]).collect(),
        }
    }
}

pub struct MlmOutput {
    /// `[total masked positions, vocab]`.
    pub logits: Var,
    /// First logit row of each example.
    pub offsets: Vec<usize>,
    pub losses: Vec<Vec<PositionLoss>>,
}

impl EncoderParams {
    pub fn init<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        tok_emb: ParamId,
        rng: &mut R,
    ) -> Self {
        let h = config.hidden_size;
        let pos_emb = store.add(
            "encoder.pos_emb",
            normal_tensor(&[config.max_seq_len, h], INIT_STD, rng),
        );
        let emb_ln_g = store.add("encoder.emb_ln.gamma", Tensor::filled(&[h], 1.0));
        let emb_ln_b = store.add("encoder.emb_ln.beta", Tensor::zeros(&[h]));
        let layers = (0..config.num_layers)
            .map(|l| {
                LayerParams::init(
                    store,
                    &format!("encoder.layer{l}"),
                    h,
                    h * config.ffn_multiplier,
                    rng,
                )
            })
            .collect();
        let head_w = store.add(
            "encoder.head.w",
            normal_tensor(&[h, config.vocab_size], INIT_STD, rng),
        );
        let head_b = store.add("encoder.head.b", Tensor::zeros(&[config.vocab_size]));
        Self {
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            head_w,
            head_b,
        }
    }

    /// Canonical order: embeddings, positional, layers by depth, head.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            v.extend(l.ids());
        }
        v.extend([self.head_w, self.head_b]);
        v
    }

    /// Final hidden states `[total tokens, H]` for a packed list of sentences.
    pub fn hidden(&self, pass: &mut Pass<'_>, sentences: &[&[u32]]) -> Result<Var> {
        if let Some(s) = sentences.iter().find(|s| s.len() > self.config.max_seq_len) {
            return Err(Error::Argument(format!(
                "sentence length {} exceeds max_seq_len {}",
                s.len(),
                self.config.max_seq_len
            )));
        }
        let (ids, pos, segments) = pack(sentences);
        let table = pass.p(self.tok_emb)?;
        let e = pass.tape.embedding(table, &ids)?;
        let pt = pass.p(self.pos_emb)?;
        let pe = pass.tape.embedding(pt, &pos)?;
        let x = pass.tape.add(e, pe)?;
        let mut x = pass.layernorm(x, self.emb_ln_g, self.emb_ln_b)?;
        x = pass.drop(x)?;
        for layer in &self.layers {
            x = pass.block(layer, x, &segments, self.config.num_heads)?;
        }
        Ok(x)
    }

    /// Logits at every masked position of every example plus the
    /// per-position losses.
    pub fn mlm_forward(&self, pass: &mut Pass<'_>, examples: &[MlmExample<'_>]) -> Result<MlmOutput> {
        let inputs: Vec<&[u32]> = examples.iter().map(|e| e.input).collect();
        let mut rows = Vec::new();
        let mut offsets = Vec::with_capacity(examples.len());
        let mut start = 0;
        for ex in examples {
            offsets.push(rows.len());
            for &p in ex.positions {
                if p >= ex.input.len() {
                    return Err(Error::Index {
                        what: "sentence",
                        index: p,
                        size: ex.input.len(),
                    });
                }
                rows.push(start + p);
            }
            start += ex.input.len();
        }
        let hidden = self.hidden(pass, &inputs)?;
        let picked = pass.tape.gather_rows(hidden, &rows)?;
        let logits = pass.linear(picked, self.head_w, self.head_b)?;

        let values = pass.tape.value(logits);
        let v = self.config.vocab_size;
        let mut losses = Vec::with_capacity(examples.len());
        for (ex, &off) in examples.iter().zip(&offsets) {
            let mut per = Vec::with_capacity(ex.positions.len());
            for (j, (&p, &t)) in ex.positions.iter().zip(&ex.targets).enumerate() {
                if t as usize >= v {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: t as usize,
                        size: v,
                    });
                }
                let lp = tensor::log_softmax(&values.data()[(off + j) * v..(off + j + 1) * v]);
                let entropy = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                per.push(PositionLoss {
                    position: p,
                    loss: -lp[t as usize],
                    entropy,
                });
            }
            losses.push(per);
        }
        Ok(MlmOutput {
            logits,
            offsets,
            losses,
        })
    }

    /// `sum_s weight_s * sentence_loss_s` as a tape scalar, or `None` when
    /// no position is masked.
    pub fn mlm_objective(
        tape: &mut Tape,
        out: &MlmOutput,
        examples: &[MlmExample<'_>],
        weights: &[f64],
        reduction: Reduction,
    ) -> Result<Option<Var>> {
        let mut picks = Vec::new();
        for ((ex, &off), &w) in examples.iter().zip(&out.offsets).zip(weights) {
            let k = ex.positions.len();
            if k == 0 {
                continue;
            }
            let c = w * reduction.per_position(k);
            for (j, &t) in ex.targets.iter().enumerate() {
                picks.push(NllPick {
                    row: off + j,
                    col: t as usize,
                    coef: c,
                });
            }
        }
        if picks.is_empty() {
            return Ok(None);
        }
        tape.softmax_nll(out.logits, &picks).map(Some)
    }
}

fn check_masked(masked: &TokenSequence, plan: &MaskPlan, original: &TokenSequence) -> Result<()> {
    if masked.len() != original.len() {
        return Err(Error::Argument(format!(
            "masked length {} != original length {}",
            masked.len(),
            original.len()
        )));
    }
    plan.validate(original.len())?;
    let mut selected = vec![false; original.len()];
    for &p in &plan.positions {
        selected[p] = true;
    }
    if let Some(i) = (0..original.len()).find(|&i| !selected[i] && masked.0[i] != original.0[i]) {
        return Err(Error::Argument(format!(
            "position {i} differs but is not in the plan"
        )));
    }
    Ok(())
}

/// Per-position losses of one masked sentence; dropout off.
pub fn forward_mlm(
    model: &Model,
    masked: &TokenSequence,
    plan: &MaskPlan,
    original: &TokenSequence,
) -> Result<Vec<PositionLoss>> {
    check_masked(masked, plan, original)?;
    if plan.positions.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store);
    let mut pass = Pass {
        tape: &mut tape,
        binder: &mut binder,
        store: &model.store,
        dropout: None,
    };
    let ex = MlmExample::new(&masked.0, &plan.positions, &original.0);
    let out = model.encoder.mlm_forward(&mut pass, std::slice::from_ref(&ex))?;
    Ok(out.losses.into_iter().next().unwrap_or_default())
}

/// Sentence loss under `reduction`; 0 for an empty list.
pub fn sentence_loss(losses: &[PositionLoss], reduction: Reduction) -> f64 {
    let v: Vec<f64> = losses.iter().map(|l| l.loss).collect();
    reduction.combine(&v)
}

/// Flattened encoder gradient (canonical order) and its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceGradient {
    pub grad: Vec<f64>,
    pub norm: f64,
    pub losses: Vec<PositionLoss>,
}

/// Gradient of `weight * sentence_loss` with respect to every encoder
/// parameter.
pub fn sentence_gradient(
    model: &Model,
    masked: &TokenSequence,
    plan: &MaskPlan,
    original: &TokenSequence,
    weight: f64,
) -> Result<SentenceGradient> {
    sentence_gradient_with(model, masked, plan, original, weight, Reduction::Mean)
}

pub fn sentence_gradient_with(
    model: &Model,
    masked: &TokenSequence,
    plan: &MaskPlan,
    original: &TokenSequence,
    weight: f64,
    reduction: Reduction,
) -> Result<SentenceGradient> {
    check_masked(masked, plan, original)?;
    let ids = model.encoder.ids();
    if plan.positions.is_empty() {
        return Ok(SentenceGradient {
            grad: vec![0.0; model.store.numel(&ids)],
            norm: 0.0,
            losses: Vec::new(),
        });
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store);
    let mut pass = Pass {
        tape: &mut tape,
        binder: &mut binder,
        store: &model.store,
        dropout: None,
    };
    let ex = MlmExample::new(&masked.0, &plan.positions, &original.0);
    let examples = std::slice::from_ref(&ex);
    let out = model.encoder.mlm_forward(&mut pass, examples)?;
    let obj = EncoderParams::mlm_objective(&mut tape, &out, examples, &[weight], reduction)?
        .expect("plan is non-empty");
    let grads = tape.backward(obj)?;
    let grad = binder.flat_grad(&grads, &model.store, &ids);
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(SentenceGradient {
        grad,
        norm,
        losses: out.losses.into_iter().next().unwrap_or_default(),
    })
}

/// `x` with every listed position replaced by `[MASK]`.
pub fn pure_masked(x: &TokenSequence, positions: &[usize]) -> TokenSequence {
    let mut m = x.clone();
    for &p in positions {
        m.0[p] = MASK;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionRow {
    pub position: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// For each position alone, the `[MASK]` loss and the encoder gradient norm.
pub fn position_loss_and_norm_table(model: &Model, x: &TokenSequence) -> Result<Vec<PositionRow>> {
    if x.is_empty() {
        return Err(Error::Argument("empty sentence".into()));
    }
    (0..x.len())
        .map(|i| {
            let plan = MaskPlan::pure_mask(vec![i], x.len());
            let masked = pure_masked(x, &plan.positions);
            let g = sentence_gradient(model, &masked, &plan, x, 1.0)?;
            Ok(PositionRow {
                position: i,
                loss: g.losses[0].loss,
                grad_norm: g.norm,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_with_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            max_seq_len: 8,
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_multiplier: 2,
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = Model::new(EncoderConfig::toy(32), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = TokenSequence((3..15).collect());
        let plan = MaskPlan::pure_mask(vec![4], x.len());
        let m = pure_masked(&x, &plan.positions);
        let l = forward_mlm(&model, &m, &plan, &x).unwrap();
        assert_eq!(l.len(), 1);
        assert!((l[0].loss - 32f64.ln()).abs() < 0.5, "{}", l[0].loss);
    }

    #[test]
    fn empty_plan_gives_zero_loss_and_gradient() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = TokenSequence(vec![3, 4, 5]);
        let plan = MaskPlan::pure_mask(vec![], 3);
        assert!(forward_mlm(&model, &x, &plan, &x).unwrap().is_empty());
        assert_eq!(sentence_loss(&[], Reduction::Mean), 0.0);
        let g = sentence_gradient(&model, &x, &plan, &x, 1.0).unwrap();
        assert_eq!(g.norm, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sentence_loss_is_mean() {
        let ls = [
            PositionLoss { position: 0, loss: 2.0, entropy: 0.0 },
            PositionLoss { position: 1, loss: 1.0, entropy: 0.0 },
        ];
        assert_eq!(sentence_loss(&ls, Reduction::Mean), 1.5);
        assert_eq!(sentence_loss(&ls, Reduction::Sum), 3.0);
    }

    #[test]
    fn gradient_scales_linearly_with_weight() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = TokenSequence(vec![3, 4, 5, 6, 7]);
        let plan = MaskPlan::pure_mask(vec![1, 3], 5);
        let m = pure_masked(&x, &plan.positions);
        let g0 = sentence_gradient(&model, &m, &plan, &x, 0.0).unwrap();
        assert_eq!(g0.norm, 0.0);
        let g1 = sentence_gradient(&model, &m, &plan, &x, 1.0).unwrap();
        let g2 = sentence_gradient(&model, &m, &plan, &x, 2.0).unwrap();
        for (a, b) in g1.grad.iter().zip(&g2.grad) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn plan_errors() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = TokenSequence(vec![3, 4, 5]);
        let plan = MaskPlan::pure_mask(vec![3], 3);
        assert!(matches!(
            forward_mlm(&model, &x, &plan, &x),
            Err(Error::Index { .. })
        ));
        let plan = MaskPlan::pure_mask(vec![0], 3);
        let bad = TokenSequence(vec![1, 1, 5]);
        assert!(matches!(
            forward_mlm(&model, &bad, &plan, &x),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_per_parameter() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = TokenSequence(vec![3, 9, 5, 6, 11, 4]);
        let plan = MaskPlan::pure_mask(vec![1, 4], x.len());
        let m = pure_masked(&x, &plan.positions);
        let full = sentence_gradient(&model, &m, &plan, &x, 1.0).unwrap();
        let ids = model.encoder.ids();
        let mut offset = 0;
        for &id in &ids {
            let n = model.store.get(id).len();
            let analytic = &full.grad[offset..offset + n];
            offset += n;
            let f = |tape: &mut Tape, v: Var| -> Result<Var> {
                let mut binder = Binder::new(&model.store);
                // pre-bind the perturbed parameter
                binder_set(&mut binder, id, v);
                let mut pass = Pass {
                    tape,
                    binder: &mut binder,
                    store: &model.store,
                    dropout: None,
                };
                let ex = MlmExample::new(&m.0, &plan.positions, &x.0);
                let ex = std::slice::from_ref(&ex);
                let out = model.encoder.mlm_forward(&mut pass, ex)?;
                Ok(EncoderParams::mlm_objective(pass.tape, &out, ex, &[1.0], Reduction::Mean)?.unwrap())
            };
            let err = grad_check_with_step(f, model.store.get(id), 1e-5).unwrap();
            assert!(err <= 1e-4, "{}: {err}", model.store.name(id));
            assert!(analytic.iter().all(|a| a.is_finite()));
        }
        assert_eq!(offset, full.grad.len());
    }

    fn binder_set(b: &mut Binder, id: ParamId, v: Var) {
        b.preset(id, v);
    }

    #[test]
    fn position_table_is_deterministic() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let x = TokenSequence(vec![3, 4, 5, 6]);
        let a = position_loss_and_norm_table(&model, &x).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, position_loss_and_norm_table(&model, &x).unwrap());
        assert_eq!(position_loss_and_norm_table(&model, &TokenSequence(vec![5])).unwrap().len(), 1);
    }
}
