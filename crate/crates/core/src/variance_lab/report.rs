use serde::{Deserialize, Serialize};

/// How a vector gradient's covariance is reduced to one number.
pub const VARIANCE_SUMMARY: &str = "trace_of_covariance";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub total: f64,
    pub mask_term: f64,
    pub sentence_term: f64,
}

/// Total gradient variance split into the within-sentence (mask) and
/// between-sentence terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub variance_summary: String,
    pub total: f64,
    pub mask_term: f64,
    pub sentence_term: f64,
    /// `total - (mask_term + sentence_term)`.
    pub residual: f64,
    /// Monte Carlo only; `None` when there were too few samples to batch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stderr: Option<StandardErrors>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub samples_per_sentence: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub num_sentences: Option<usize>,
}

impl VarianceReport {
    pub fn exact(total: f64, mask_term: f64, sentence_term: f64) -> Self {
        Self {
            variance_summary: VARIANCE_SUMMARY.into(),
            total,
            mask_term,
            sentence_term,
            residual: total - (mask_term + sentence_term),
            stderr: None,
            samples_per_sentence: None,
            num_sentences: None,
        }
    }

    /// `|residual| / total`, 0 when the total is 0.
    pub fn relative_residual(&self) -> f64 {
        if self.total == 0.0 {
            self.residual.abs()
        } else {
            (self.residual / self.total).abs()
        }
    }
}
