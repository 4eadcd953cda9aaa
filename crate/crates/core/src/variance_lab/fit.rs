use serde::Serialize;

use super::enumerate::{subset_probability, subset_probability_grad};
use super::exact::{optimal_subset_proposal, subset_proposal_variance, SubsetTable};
use crate::error::{Error, Result};
use crate::mask_proposal::ProposalDistribution;

pub const FIT_ITERATIONS: usize = 500;
pub const FIT_STEP: f64 = 0.1;
/// Smallest probability a fitted position may take.
pub const FIT_FLOOR: f64 = 1e-6;

/// Euclidean projection onto `{p : p_i >= floor, sum p = 1}`.
pub fn project_simplex(y: &[f64], floor: f64) -> Vec<f64> {
    let n = y.len();
    let mass = 1.0 - floor * n as f64;
    let z: Vec<f64> = y.iter().map(|v| v - floor).collect();
    let mut s = z.clone();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v;
        let t = (acc - mass) / (i + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    z.iter().map(|v| (v - theta).max(0.0) + floor).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionFit {
    pub proposal: ProposalDistribution,
    pub variance: f64,
    pub uniform_variance: f64,
    /// Variance of the norm-proportional subset distribution, the lower
    /// bound no per-position proposal can beat.
    pub optimal_subset_variance: f64,
}

/// Per-position proposal minimising the ratio-weighted variance, by
/// projected gradient descent with normalised steps.
pub fn best_fit_position_proposal(table: &SubsetTable) -> Result<PositionFit> {
    let n = table.n;
    if n == 0 || table.is_empty() {
        return Err(Error::Argument("empty table".into()));
    }
    let u = 1.0 / table.len() as f64;
    let sq: Vec<f64> = table.norms().iter().map(|v| v * v).collect();
    let second_moment = |p: &[f64]| -> f64 {
        table
            .subsets
            .iter()
            .zip(&sq)
            .map(|(s, g2)| u * u * g2 / subset_probability(p, s))
            .sum()
    };
    let uniform = vec![1.0 / n as f64; n];
    let uniform_variance = subset_proposal_variance(table, &vec![u; table.len()])?;
    // objective = second moment / uniform second moment; the mean term is
    // the same for every proposal
    let scale = second_moment(&uniform);
    if scale <= 0.0 {
        return Err(Error::Degenerate("every subset has a zero gradient".into()));
    }
    let mut p = uniform.clone();
    let mut best = (second_moment(&p) / scale, p.clone());
    for t in 0..FIT_ITERATIONS {
        let mut grad = vec![0.0; n];
        for (s, g2) in table.subsets.iter().zip(&sq) {
            let q = subset_probability(&p, s);
            let c = -u * u * g2 / (q * q) / scale;
            for (gi, d) in grad.iter_mut().zip(subset_probability_grad(&p, s)) {
                *gi += c * d;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let step = FIT_STEP / ((t + 1) as f64).sqrt();
        let y: Vec<f64> = p.iter().zip(&grad).map(|(pi, g)| pi - step * g / norm).collect();
        p = project_simplex(&y, FIT_FLOOR);
        let f = second_moment(&p) / scale;
        if f < best.0 {
            best = (f, p.clone());
        }
    }
    let proposal = ProposalDistribution(best.1);
    let q: Vec<f64> = table.subsets.iter().map(|s| subset_probability(proposal.probs(), s)).collect();
    let variance = subset_proposal_variance(table, &q)?;
    let optimal = optimal_subset_proposal(table)?;
    Ok(PositionFit {
        proposal,
        variance,
        uniform_variance,
        optimal_subset_variance: subset_proposal_variance(table, &optimal)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_the_simplex() {
        let p = project_simplex(&[0.9, 0.5, -0.3], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.7).abs() < 1e-12 && (p[1] - 0.3).abs() < 1e-12 && p[2] == 0.0);
        let q = project_simplex(&[5.0, 0.0, 0.0], 0.01);
        assert!(q.iter().all(|v| *v >= 0.01 - 1e-15));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(project_simplex(&[0.25; 4], 0.0), vec![0.25; 4]);
    }

    #[test]
    fn fit_sits_between_optimum_and_uniform() {
        // K=1: per-position and subset proposals coincide, so the fit
        // should reach the optimum closely
        let t = SubsetTable::from_values(4, 1, vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        let f = best_fit_position_proposal(&t).unwrap();
        assert!(f.variance <= f.uniform_variance);
        assert!(f.variance >= f.optimal_subset_variance - 1e-12);
        assert!(f.variance - f.optimal_subset_variance < 1e-2 * f.uniform_variance);
        let t2 = SubsetTable::from_values(5, 2, (0..10).map(|i| 1.0 + (i * i) as f64).collect()).unwrap();
        let f2 = best_fit_position_proposal(&t2).unwrap();
        assert!(f2.variance <= f2.uniform_variance);
        assert!(f2.variance >= f2.optimal_subset_variance - 1e-12);
    }
}
