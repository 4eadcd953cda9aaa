//! Exact and sampled measurements of masked-LM gradient variance.
//!
//! Exact routines enumerate every `K`-subset of a short sentence, take the
//! encoder gradient under pure `[MASK]` corruption for each, and compute
//! expectations under uniform or proposal sampling. Variances of vector
//! gradients are traces of the covariance.

mod correlation;
mod enumerate;
mod exact;
mod fit;
mod mc;
mod report;

pub use correlation::{loss_norm_correlation, pearson, ranks, spearman, Correlation, MIN_PAIRS};
pub use enumerate::{
    binomial, combinations, enumerate_masks, subset_probability, subset_probability_grad, MaskEnumeration,
    ENUMERATION_CAP,
};
pub use exact::{
    decompose, exact_variance_decomposition, importance_estimator_audit, optimal_subset_proposal,
    proposal_variance, subset_proposal_variance, subset_ratio, ImportanceAudit, RatioKind, SubsetTable,
    WeightedTable,
};
pub use fit::{best_fit_position_proposal, project_simplex, PositionFit, FIT_FLOOR, FIT_ITERATIONS, FIT_STEP};
pub use mc::{mc_variance_decomposition, McOptions, McProposal};
pub use report::{StandardErrors, VarianceReport, VARIANCE_SUMMARY};
