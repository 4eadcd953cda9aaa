use rand::seq::index;
use rand::Rng;

use super::enumerate::{binomial, subset_probability};
use super::exact::RatioKind;
use super::report::{StandardErrors, VarianceReport};
use crate::corpus::TokenSequence;
use crate::encoder::{pure_masked, sentence_gradient};
use crate::error::{Error, Result};
use crate::mask_proposal::{importance_ratio, sample_positions, MaskPlan, ProposalDistribution};
use crate::masking::{num_masked, DEFAULT_MASK_RATE};
use crate::model::Model;

/// Mask distribution sampled by the Monte Carlo estimator.
#[derive(Debug, Clone, Copy)]
pub enum McProposal<'a> {
    Uniform,
    /// The model's own proposal net.
    MapNet,
    /// One distribution per sentence.
    Fixed(&'a [ProposalDistribution]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub num_samples: usize,
    /// `None` uses `max(1, round(0.15 n))` per sentence.
    pub k: Option<usize>,
    pub ratio: RatioKind,
    /// Batches for the standard errors; capped so each holds 2 samples.
    pub stderr_batches: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            num_samples: 64,
            k: None,
            ratio: RatioKind::Exact,
            stderr_batches: 8,
        }
    }
}

/// Welford accumulator over vectors, tracking the summed squared distance
/// to the running mean.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: f64,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: 0.0,
        }
    }

    fn push(&mut self, y: &[f64]) {
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        let mut m2 = 0.0;
        for (m, &v) in self.mean.iter_mut().zip(y) {
            let d = v - *m;
            *m += d * inv;
            m2 += d * (v - *m);
        }
        self.m2 += m2;
    }
}

/// Sums across sentences from which the three terms are estimated.
#[derive(Debug, Clone)]
struct Totals {
    sentences: usize,
    samples: usize,
    sum_mean: Vec<f64>,
    sum_mean_sq: f64,
    sum_var: f64,
    sum_m2: f64,
}

impl Totals {
    fn new(dim: usize) -> Self {
        Self {
            sentences: 0,
            samples: 0,
            sum_mean: vec![0.0; dim],
            sum_mean_sq: 0.0,
            sum_var: 0.0,
            sum_m2: 0.0,
        }
    }

    fn add(&mut self, w: &Welford) {
        self.sentences += 1;
        self.samples = w.n;
        for (s, m) in self.sum_mean.iter_mut().zip(&w.mean) {
            *s += m;
        }
        self.sum_mean_sq += w.mean.iter().map(|m| m * m).sum::<f64>();
        self.sum_var += w.m2 / (w.n - 1) as f64;
        self.sum_m2 += w.m2;
    }

    /// (total, mask, sentence), each unbiased.
    fn estimate(&self) -> (f64, f64, f64) {
        let s = self.sentences as f64;
        let n = self.samples as f64;
        let grand_sq: f64 = self.sum_mean.iter().map(|m| (m / s) * (m / s)).sum();
        let between_raw = (self.sum_mean_sq - s * grand_sq) / s;
        let mask = self.sum_var / s;
        let sentence = between_raw - (1.0 - 1.0 / s) * mask / n;
        let total = self.sum_m2 / (s * n) + between_raw + mask / (s * n);
        (total, mask, sentence)
    }
}

fn draw<R: Rng + ?Sized>(
    x: &TokenSequence,
    k: usize,
    dist: Option<&ProposalDistribution>,
    ratio: RatioKind,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    let n = x.len();
    match dist {
        None => Ok((index::sample(rng, n, k).into_vec(), 1.0)),
        Some(d) => {
            let (positions, raw) = sample_positions(d, k, rng)?;
            let r = match ratio {
                RatioKind::Exact => {
                    let mut sorted = positions.clone();
                    sorted.sort_unstable();
                    (1.0 / binomial(n, k) as f64) / subset_probability(d.probs(), &sorted)
                }
                RatioKind::Product => importance_ratio(&raw, n, k, 0.0)?.0,
                RatioKind::ProductClipped(eps) => importance_ratio(&raw, n, k, eps)?.1,
            };
            Ok((positions, r))
        }
    }
}

/// Sampled counterpart of the exact decomposition, with batch-means
/// standard errors. Values are `r g` with `g` the pure-`[MASK]` encoder
/// gradient.
pub fn mc_variance_decomposition<R: Rng + ?Sized>(
    model: &Model,
    corpus: &[TokenSequence],
    proposal: McProposal<'_>,
    opts: McOptions,
    rng: &mut R,
) -> Result<VarianceReport> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    if opts.num_samples < 2 {
        return Err(Error::Argument("need at least 2 samples per sentence".into()));
    }
    if let McProposal::Fixed(d) = proposal {
        if d.len() != corpus.len() {
            return Err(Error::dim("mc proposal", format!("{} distributions for {} sentences", d.len(), corpus.len())));
        }
    }
    let dim = model.store.numel(&model.encoder.ids());
    let batches = opts.stderr_batches.min(opts.num_samples / 2);
    let per_batch = if batches >= 2 { opts.num_samples / batches } else { 0 };
    let mut all = Totals::new(dim);
    let mut parts: Vec<Totals> = (0..if batches >= 2 { batches } else { 0 }).map(|_| Totals::new(dim)).collect();

    for (si, x) in corpus.iter().enumerate() {
        let n = x.len();
        let k = opts.k.unwrap_or_else(|| num_masked(n, DEFAULT_MASK_RATE));
        let dist = match proposal {
            McProposal::Uniform => None,
            McProposal::MapNet => Some(model.mapnet.propose(&model.store, x.tokens())?),
            McProposal::Fixed(d) => Some(d[si].clone()),
        };
        let mut w = Welford::new(dim);
        let mut bw: Vec<Welford> = parts.iter().map(|_| Welford::new(dim)).collect();
        for j in 0..opts.num_samples {
            let (positions, r) = draw(x, k, dist.as_ref(), opts.ratio, rng)?;
            let plan = MaskPlan::pure_mask(positions, n);
            let masked = pure_masked(x, &plan.positions);
            let g = sentence_gradient(model, &masked, &plan, x, r)?;
            w.push(&g.grad);
            if per_batch > 0 && j < per_batch * bw.len() {
                bw[j / per_batch].push(&g.grad);
            }
        }
        all.add(&w);
        for (t, b) in parts.iter_mut().zip(&bw) {
            t.add(b);
        }
    }

    let (total, mask_term, sentence_term) = all.estimate();
    let mut report = VarianceReport::exact(total, mask_term, sentence_term);
    report.samples_per_sentence = Some(opts.num_samples);
    report.num_sentences = Some(corpus.len());
    if parts.len() >= 2 {
        let ests: Vec<(f64, f64, f64)> = parts.iter().map(Totals::estimate).collect();
        let se = |f: fn(&(f64, f64, f64)) -> f64| {
            let b = ests.len() as f64;
            let m = ests.iter().map(f).sum::<f64>() / b;
            let var = ests.iter().map(|e| (f(e) - m).powi(2)).sum::<f64>() / (b - 1.0);
            (var / b).sqrt()
        };
        report.stderr = Some(StandardErrors {
            total: se(|e| e.0),
            mask_term: se(|e| e.1),
            sentence_term: se(|e| e.2),
        });
    }
    Ok(report)
}
