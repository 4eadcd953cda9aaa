use serde::Serialize;

use super::enumerate::{check_cap, combinations, enumerate_masks, subset_probability};
use super::report::VarianceReport;
use crate::corpus::TokenSequence;
use crate::encoder::{pure_masked, sentence_gradient};
use crate::error::{Error, Result};
use crate::mask_proposal::{MaskPlan, ProposalDistribution};
use crate::model::Model;

/// Value of every `K`-subset of one sentence: the flattened encoder
/// gradient under pure `[MASK]` corruption, or an arbitrary vector in
/// scalar-toy mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetTable {
    pub n: usize,
    pub k: usize,
    pub subsets: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl SubsetTable {
    pub fn from_model(model: &Model, x: &TokenSequence, k: usize, cap: usize) -> Result<Self> {
        let n = x.len();
        check_cap(n, k, cap)?;
        let subsets = combinations(n, k);
        let values = subsets
            .iter()
            .map(|s| {
                let plan = MaskPlan::pure_mask(s.clone(), n);
                let masked = pure_masked(x, s);
                Ok(sentence_gradient(model, &masked, &plan, x, 1.0)?.grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, k, subsets, values })
    }

    /// Scalar-toy mode: one value per subset in lexicographic order.
    pub fn from_values(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        let subsets = combinations(n, k);
        if values.len() != subsets.len() {
            return Err(Error::dim(
                "scalar table",
                format!("{} values for {} subsets", values.len(), subsets.len()),
            ));
        }
        Ok(Self {
            n,
            k,
            subsets,
            values: values.into_iter().map(|v| vec![v]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn norms(&self) -> Vec<f64> {
        self.values.iter().map(|v| sq(v).sqrt()).collect()
    }

    /// `E[g]` under uniform subsets.
    pub fn uniform_mean(&self) -> Vec<f64> {
        let w = 1.0 / self.len() as f64;
        weighted_sum(self.values.iter().map(|v| (w, v.as_slice())), self.dim())
    }

    /// Subset probabilities of a per-position proposal.
    pub fn subset_probs(&self, proposal: &ProposalDistribution) -> Result<Vec<f64>> {
        Ok(enumerate_masks(self.n, self.k, Some(proposal), usize::MAX)?.probs)
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn weighted_sum<'a>(items: impl Iterator<Item = (f64, &'a [f64])>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in items {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// How the weight `r` of a drawn subset is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKind {
    /// `P_uniform(subset) / P_proposal(subset)`, summed over draw orders.
    Exact,
    /// `(1/n)^K / prod_k p(pos_k)`, the per-position product.
    Product,
    /// The product form clipped to `[1-eps, 1+eps]`.
    ProductClipped(f64),
}

pub fn subset_ratio(kind: RatioKind, table: &SubsetTable, i: usize, q: f64, proposal: &[f64]) -> f64 {
    match kind {
        RatioKind::Exact => (1.0 / table.len() as f64) / q,
        RatioKind::Product | RatioKind::ProductClipped(_) => {
            let u = 1.0 / table.n as f64;
            let r: f64 = table.subsets[i].iter().map(|&p| u / proposal[p]).product();
            match kind {
                RatioKind::ProductClipped(eps) => r.clamp(1.0 - eps, 1.0 + eps),
                _ => r,
            }
        }
    }
}

/// Per-subset sampling probabilities and weighted values of one sentence
/// under one masking scheme.
#[derive(Debug, Clone)]
pub struct WeightedTable<'a> {
    pub table: &'a SubsetTable,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
}

impl<'a> WeightedTable<'a> {
    pub fn uniform(table: &'a SubsetTable) -> Self {
        let c = table.len();
        Self {
            table,
            probs: vec![1.0 / c as f64; c],
            weights: vec![1.0; c],
        }
    }

    /// Draws from an arbitrary distribution over subsets, weighted by the
    /// exact ratio.
    pub fn over_subsets(table: &'a SubsetTable, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != table.len() {
            return Err(Error::dim("subset proposal", format!("{} probabilities for {} subsets", probs.len(), table.len())));
        }
        if probs.iter().any(|p| p.is_nan() || *p <= 0.0) {
            return Err(Error::Numeric("subset proposal must be strictly positive".into()));
        }
        let u = 1.0 / table.len() as f64;
        let weights = probs.iter().map(|q| u / q).collect();
        Ok(Self { table, probs, weights })
    }

    pub fn from_proposal(table: &'a SubsetTable, proposal: &ProposalDistribution, kind: RatioKind) -> Result<Self> {
        if proposal.probs().iter().any(|p| p.is_nan() || *p <= 0.0) {
            return Err(Error::Numeric("proposal must be strictly positive".into()));
        }
        if proposal.probs().windows(2).all(|w| w[0] == w[1]) {
            // every subset is equally likely; skip the rounding of the sum
            // over draw orders
            return Ok(Self::uniform(table));
        }
        let probs: Vec<f64> = table.subsets.iter().map(|s| subset_probability(proposal.probs(), s)).collect();
        let weights = (0..table.len())
            .map(|i| subset_ratio(kind, table, i, probs[i], proposal.probs()))
            .collect();
        Ok(Self { table, probs, weights })
    }

    /// `E[r g]`.
    pub fn mean(&self) -> Vec<f64> {
        weighted_sum(
            self.table.values.iter().enumerate().map(|(i, v)| (self.probs[i] * self.weights[i], v.as_slice())),
            self.table.dim(),
        )
    }

    /// Trace of the covariance of `r g`.
    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.table
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let w = self.weights[i];
                let d: f64 = v.iter().zip(&mu).map(|(x, m)| (w * x - m) * (w * x - m)).sum();
                self.probs[i] * d
            })
            .sum()
    }
}

/// Law-of-total-variance split over a corpus (uniform over sentences),
/// each sentence carrying its own subset distribution. All three terms are
/// computed independently so the residual is a genuine check.
pub fn decompose(sentences: &[WeightedTable<'_>]) -> Result<VarianceReport> {
    if sentences.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let dim = sentences[0].table.dim();
    if sentences.iter().any(|s| s.table.dim() != dim) {
        return Err(Error::dim("decompose", "sentences disagree on gradient size"));
    }
    let s = sentences.len() as f64;
    let means: Vec<Vec<f64>> = sentences.iter().map(WeightedTable::mean).collect();
    let grand = weighted_sum(means.iter().map(|m| (1.0 / s, m.as_slice())), dim);
    let mut total = 0.0;
    let mut mask_term = 0.0;
    let mut sentence_term = 0.0;
    for (st, m) in sentences.iter().zip(&means) {
        for (i, v) in st.table.values.iter().enumerate() {
            let w = st.weights[i];
            let y: Vec<f64> = v.iter().map(|x| w * x).collect();
            total += st.probs[i] * dist2(&y, &grand) / s;
            mask_term += st.probs[i] * dist2(&y, m) / s;
        }
        sentence_term += dist2(m, &grand) / s;
    }
    Ok(VarianceReport::exact(total, mask_term, sentence_term))
}

/// Uniform-mask decomposition with the encoder gradients of every subset.
pub fn exact_variance_decomposition(
    model: &Model,
    corpus: &[TokenSequence],
    k: usize,
    cap: usize,
) -> Result<VarianceReport> {
    let tables = corpus
        .iter()
        .map(|x| SubsetTable::from_model(model, x, k, cap))
        .collect::<Result<Vec<_>>>()?;
    let weighted: Vec<WeightedTable<'_>> = tables.iter().map(WeightedTable::uniform).collect();
    decompose(&weighted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceAudit {
    pub uniform_mean: Vec<f64>,
    pub weighted_mean: Vec<f64>,
    pub max_abs_deviation: f64,
}

/// `E_uniform[g]` against `E_proposal[r g]`, both exact.
pub fn importance_estimator_audit(
    table: &SubsetTable,
    proposal: &ProposalDistribution,
    kind: RatioKind,
) -> Result<ImportanceAudit> {
    let uniform_mean = table.uniform_mean();
    let weighted_mean = WeightedTable::from_proposal(table, proposal, kind)?.mean();
    let max_abs_deviation = uniform_mean
        .iter()
        .zip(&weighted_mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(ImportanceAudit {
        uniform_mean,
        weighted_mean,
        max_abs_deviation,
    })
}

/// Trace variance of `r g` with subsets drawn from `proposal` and `r` the
/// exact ratio.
pub fn proposal_variance(table: &SubsetTable, proposal: &ProposalDistribution) -> Result<f64> {
    Ok(WeightedTable::from_proposal(table, proposal, RatioKind::Exact)?.variance())
}

/// Same for a distribution given directly over subsets.
pub fn subset_proposal_variance(table: &SubsetTable, probs: &[f64]) -> Result<f64> {
    Ok(WeightedTable::over_subsets(table, probs.to_vec())?.variance())
}

/// Subset distribution proportional to the value norm.
pub fn optimal_subset_proposal(table: &SubsetTable) -> Result<Vec<f64>> {
    let norms = table.norms();
    let total: f64 = norms.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("every subset has a zero gradient".into()));
    }
    Ok(norms.iter().map(|n| n / total).collect())
}
