//! Uniform and proposal masking, 80/10/10 corruption and the
//! exploration schedule that mixes the two.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, MASK, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::mask_proposal::{
    importance_ratio, sample_positions, CorruptionAction, MaskPlan, MaskSource,
    ProposalDistribution,
};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const MASK_FRACTION: f64 = 0.8;
pub const RANDOM_FRACTION: f64 = 0.1;

/// `max(1, round_half_up(rate * n))`, capped at `n`.
pub fn num_masked(n: usize, mask_rate: f64) -> usize {
    let k = (mask_rate * n as f64 + 0.5).floor() as usize;
    k.max(1).min(n)
}

fn check_rate(mask_rate: f64) -> Result<()> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Argument(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    Ok(())
}

/// `K` positions uniformly without replacement, ratio 1.
pub fn rand_mask<R: Rng + ?Sized>(x: &TokenSequence, mask_rate: f64, rng: &mut R) -> Result<MaskPlan> {
    check_rate(mask_rate)?;
    if x.is_empty() {
        return Err(Error::Argument("cannot mask an empty sentence".into()));
    }
    let n = x.len();
    let k = num_masked(n, mask_rate);
    let positions = index::sample(rng, n, k).into_vec();
    Ok(uniform_plan(positions, n))
}

/// Each position independently with probability `mask_rate`; may select
/// nothing. Only used for variance comparisons.
pub fn rand_mask_bernoulli<R: Rng + ?Sized>(
    x: &TokenSequence,
    mask_rate: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_rate(mask_rate)?;
    if x.is_empty() {
        return Err(Error::Argument("cannot mask an empty sentence".into()));
    }
    let positions = (0..x.len()).filter(|_| rng.random::<f64>() < mask_rate).collect();
    Ok(uniform_plan(positions, x.len()))
}

fn uniform_plan(positions: Vec<usize>, n: usize) -> MaskPlan {
    let k = positions.len();
    MaskPlan {
        positions,
        raw_probs: vec![1.0 / n as f64; k],
        actions: Vec::new(),
        ratio: 1.0,
        clipped_ratio: 1.0,
        source: MaskSource::Uniform,
    }
}

/// `K` positions from `dist` plus the importance ratio against uniform.
pub fn prop_mask<R: Rng + ?Sized>(
    dist: &ProposalDistribution,
    mask_rate: f64,
    eps: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    check_rate(mask_rate)?;
    let n = dist.len();
    if n == 0 {
        return Err(Error::Argument("cannot mask an empty sentence".into()));
    }
    let k = num_masked(n, mask_rate);
    let (positions, raw_probs) = sample_positions(dist, k, rng)?;
    let (ratio, clipped_ratio) = importance_ratio(&raw_probs, n, k, eps)?;
    Ok(MaskPlan {
        positions,
        raw_probs,
        actions: Vec::new(),
        ratio,
        clipped_ratio,
        source: MaskSource::Proposal,
    })
}

/// Applies one i.i.d. action per planned position and records it in the
/// plan. Random replacements never draw reserved tokens.
pub fn corrupt<R: Rng + ?Sized>(
    x: &TokenSequence,
    plan: &mut MaskPlan,
    vocab_size: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    plan.validate(x.len())?;
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Argument(format!("vocabulary of {vocab_size} has no ordinary tokens")));
    }
    let mut out = x.clone();
    plan.actions.clear();
    for &p in &plan.positions {
        let u: f64 = rng.random();
        let action = if u < MASK_FRACTION {
            out.0[p] = MASK;
            CorruptionAction::Mask
        } else if u < MASK_FRACTION + RANDOM_FRACTION {
            let t = rng.random_range(NUM_RESERVED as u32..vocab_size as u32);
            out.0[p] = t;
            CorruptionAction::Random(t)
        } else {
            CorruptionAction::Keep
        };
        plan.actions.push(action);
    }
    Ok(out)
}

/// Probability of the uniform branch, falling linearly from `start_p` at
/// step 0 to `end_p` at `end_step` and flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub start_p: f64,
    pub end_p: f64,
    pub end_step: u64,
}

impl ExplorationSchedule {
    pub fn new(end_step: u64) -> Self {
        Self {
            start_p: 1.0,
            end_p: 0.33,
            end_step,
        }
    }

    /// Constant probability `p`.
    pub fn pinned(p: f64) -> Self {
        Self {
            start_p: p,
            end_p: p,
            end_step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.end_p && self.end_p <= self.start_p && self.start_p <= 1.0) {
            return Err(Error::Config {
                field: "explore".into(),
                message: format!(
                    "need 0 <= end_p ({}) <= start_p ({}) <= 1",
                    self.end_p, self.start_p
                ),
            });
        }
        Ok(())
    }
}

pub fn explore_p(schedule: &ExplorationSchedule, step: u64) -> f64 {
    if step >= schedule.end_step {
        return schedule.end_p;
    }
    let t = step as f64 / schedule.end_step as f64;
    schedule.start_p + (schedule.end_p - schedule.start_p) * t
}

/// Uniform plan with probability `explore_p(step)`, otherwise a plan drawn
/// from `proposal`. The proposal is only evaluated on the proposal branch.
pub fn mixed_mask<R, F>(
    x: &TokenSequence,
    step: u64,
    schedule: &ExplorationSchedule,
    proposal: F,
    mask_rate: f64,
    eps: f64,
    rng: &mut R,
) -> Result<MaskPlan>
where
    R: Rng + ?Sized,
    F: FnOnce() -> Result<ProposalDistribution>,
{
    let p = explore_p(schedule, step);
    // always consume the coin so both branches leave the stream aligned
    let coin: f64 = rng.random();
    if coin < p {
        rand_mask(x, mask_rate, rng)
    } else {
        let dist = proposal()?;
        if dist.len() != x.len() {
            return Err(Error::dim(
                "mixed_mask",
                format!("proposal over {} positions for a sentence of {}", dist.len(), x.len()),
            ));
        }
        prop_mask(&dist, mask_rate, eps, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k_rounding() {
        assert_eq!(num_masked(100, 0.15), 15);
        assert_eq!(num_masked(3, 0.15), 1);
        assert_eq!(num_masked(10, 0.15), 2);
        assert_eq!(num_masked(1, 0.15), 1);
        assert_eq!(num_masked(4, 0.99), 4);
    }

    #[test]
    fn rand_mask_errors_and_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rand_mask(&TokenSequence(vec![]), 0.15, &mut rng).is_err());
        assert!(rand_mask(&TokenSequence(vec![3]), 1.0, &mut rng).is_err());
        let plan = rand_mask(&TokenSequence((3..23).collect()), 0.15, &mut rng).unwrap();
        assert_eq!(plan.k(), 3);
        assert_eq!((plan.ratio, plan.clipped_ratio), (1.0, 1.0));
        plan.validate(20).unwrap();
    }

    #[test]
    fn corrupt_touches_only_planned_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TokenSequence((3..13).collect());
        let mut empty = MaskPlan::pure_mask(vec![], 10);
        assert_eq!(corrupt(&x, &mut empty, 20, &mut rng).unwrap(), x);
        for _ in 0..200 {
            let mut plan = rand_mask(&x, 0.3, &mut rng).unwrap();
            let y = corrupt(&x, &mut plan, 20, &mut rng).unwrap();
            assert_eq!(plan.actions.len(), plan.k());
            for i in 0..x.len() {
                match plan.positions.iter().position(|&p| p == i) {
                    None => assert_eq!(y.0[i], x.0[i]),
                    Some(j) => match plan.actions[j] {
                        CorruptionAction::Mask => assert_eq!(y.0[i], MASK),
                        CorruptionAction::Random(t) => {
                            assert_eq!(y.0[i], t);
                            assert!(t as usize >= NUM_RESERVED);
                        }
                        CorruptionAction::Keep => assert_eq!(y.0[i], x.0[i]),
                    },
                }
            }
        }
    }

    #[test]
    fn schedule_anchors() {
        let s = ExplorationSchedule::new(1000);
        assert_eq!(explore_p(&s, 0), 1.0);
        assert_eq!(explore_p(&s, 1000), 0.33);
        assert!((explore_p(&s, 500) - 0.665).abs() < 1e-15);
        assert_eq!(explore_p(&s, 5000), 0.33);
        let mut last = 1.0;
        for step in 0..1200 {
            let p = explore_p(&s, step);
            assert!(p <= last);
            last = p;
        }
        assert!(ExplorationSchedule { start_p: 0.2, end_p: 0.5, end_step: 3 }.validate().is_err());
    }

    #[test]
    fn pinned_one_matches_rand_mask() {
        let x = TokenSequence((3..20).collect());
        let s = ExplorationSchedule::pinned(1.0);
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        for step in 0..50 {
            let plan = mixed_mask(&x, step, &s, || panic!("proposal not needed"), 0.15, 0.2, &mut a).unwrap();
            let _coin: f64 = b.random();
            assert_eq!(plan, rand_mask(&x, 0.15, &mut b).unwrap());
        }
    }

    #[test]
    fn pinned_zero_matches_prop_mask() {
        let x = TokenSequence((3..9).collect());
        let d = ProposalDistribution::from_weights(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = ExplorationSchedule::pinned(0.0);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for step in 0..50 {
            let plan = mixed_mask(&x, step, &s, || Ok(d.clone()), 0.3, 0.2, &mut a).unwrap();
            let _coin: f64 = b.random();
            assert_eq!(plan, prop_mask(&d, 0.3, 0.2, &mut b).unwrap());
            assert_eq!(plan.source, MaskSource::Proposal);
        }
    }

    #[test]
    fn branch_frequencies_at_half() {
        let x = TokenSequence((3..9).collect());
        let s = ExplorationSchedule::pinned(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let uniform = (0..n)
            .filter(|_| {
                let plan = mixed_mask(&x, 0, &s, || Ok(ProposalDistribution::uniform(6)), 0.15, 0.2, &mut rng)
                    .unwrap();
                plan.source == MaskSource::Uniform
            })
            .count();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((uniform as f64 / n as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn bernoulli_variant_rate() {
        let x = TokenSequence((3..23).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let total: usize = (0..5000).map(|_| rand_mask_bernoulli(&x, 0.15, &mut rng).unwrap().k()).sum();
        let mean = total as f64 / 5000.0;
        assert!((mean - 3.0).abs() < 0.1, "{mean}");
    }
}
