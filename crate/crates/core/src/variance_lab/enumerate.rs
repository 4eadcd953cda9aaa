use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask_proposal::ProposalDistribution;

pub const ENUMERATION_CAP: usize = 10_000;

/// `C(n, k)` without overflow for the sizes that matter here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] < n - k + i) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let first = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, first);
            out.push(p);
        }
    }
    out
}

/// Probability that sequential draws without replacement from `p` produce
/// `subset` in some order.
pub fn subset_probability(p: &[f64], subset: &[usize]) -> f64 {
    let total: f64 = p.iter().sum();
    permutations(subset)
        .iter()
        .map(|order| {
            let mut left = total;
            let mut prob = 1.0;
            for &i in order {
                prob *= p[i] / left;
                left -= p[i];
            }
            prob
        })
        .sum()
}

/// Gradient of [`subset_probability`] with respect to `p`, treating `p` as
/// free coordinates whose sum is the normaliser.
pub fn subset_probability_grad(p: &[f64], subset: &[usize]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    let mut g = vec![0.0; p.len()];
    for order in permutations(subset) {
        // term = prod_j p[o_j] / D_j with D_j = total - sum_{l<j} p[o_l]
        let mut left = total;
        let mut term = 1.0;
        let mut dens = Vec::with_capacity(order.len());
        for &i in &order {
            term *= p[i] / left;
            dens.push(left);
            left -= p[i];
        }
        // d log term / d p_i: 1/p_i for each drawn i, minus 1/D_j for every
        // denominator that contains p_i
        for (j, &i) in order.iter().enumerate() {
            g[i] += term / p[i];
            for (jj, d) in dens.iter().enumerate() {
                let contains = jj <= j;
                if contains {
                    g[i] -= term / d;
                }
            }
        }
        for (i, gi) in g.iter_mut().enumerate() {
            if !order.contains(&i) {
                *gi -= term * dens.iter().map(|d| 1.0 / d).sum::<f64>();
            }
        }
    }
    g
}

/// Every `K`-subset of a sentence's positions with its probability.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskEnumeration {
    pub n: usize,
    pub k: usize,
    pub subsets: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

pub(crate) fn check_cap(n: usize, k: usize, cap: usize) -> Result<()> {
    if k > n {
        return Err(Error::Argument(format!("K={k} exceeds sentence length {n}")));
    }
    let required = binomial(n, k);
    if required > cap as u128 {
        return Err(Error::Resource { required, cap });
    }
    Ok(())
}

/// Subset probabilities under `proposal`, or uniform `1/C(n,K)` when
/// `None`.
pub fn enumerate_masks(
    n: usize,
    k: usize,
    proposal: Option<&ProposalDistribution>,
    cap: usize,
) -> Result<MaskEnumeration> {
    check_cap(n, k, cap)?;
    let subsets = combinations(n, k);
    let probs = match proposal {
        None => vec![1.0 / subsets.len() as f64; subsets.len()],
        Some(d) => {
            if d.len() != n {
                return Err(Error::dim("enumerate_masks", format!("proposal over {} positions, n={n}", d.len())));
            }
            if d.probs().iter().filter(|&&p| p > 0.0).count() < k {
                return Err(Error::Degenerate(format!("fewer than {k} positions have positive mass")));
            }
            subsets.iter().map(|s| subset_probability(d.probs(), s)).collect()
        }
    };
    Ok(MaskEnumeration { n, k, subsets, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(24, 4), 10_626);
        assert_eq!(combinations(6, 2).len(), 15);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn cap_is_enforced_with_required_size() {
        match enumerate_masks(24, 4, None, ENUMERATION_CAP) {
            Err(Error::Resource { required, cap }) => {
                assert_eq!(required, 10_626);
                assert_eq!(cap, ENUMERATION_CAP);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_is_symmetric() {
        let e = enumerate_masks(4, 2, None, ENUMERATION_CAP).unwrap();
        assert!(e.probs.iter().all(|p| *p == 1.0 / 6.0));
        let u = ProposalDistribution::uniform(4);
        let e2 = enumerate_masks(4, 2, Some(&u), ENUMERATION_CAP).unwrap();
        for p in e2.probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_draw_probability_by_hand() {
        // {0,1}: 0.4*0.3/0.6 + 0.3*0.4/0.7
        let p = [0.4, 0.3, 0.2, 0.1];
        let expect = 0.4 * 0.3 / 0.6 + 0.3 * 0.4 / 0.7;
        assert!((subset_probability(&p, &[0, 1]) - expect).abs() < 1e-15);
        let e = enumerate_masks(4, 2, Some(&ProposalDistribution(p.to_vec())), ENUMERATION_CAP).unwrap();
        assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_gradient_matches_differences() {
        let p = [0.35, 0.1, 0.25, 0.2, 0.1];
        for s in combinations(5, 3) {
            let g = subset_probability_grad(&p, &s);
            for i in 0..5 {
                let h = 1e-6;
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                let num = (subset_probability(&a, &s) - subset_probability(&b, &s)) / (2.0 * h);
                assert!((g[i] - num).abs() < 1e-8, "{s:?} {i}: {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn subset_probability_matches_the_sampler() {
        use crate::mask_proposal::sample_positions;
        use rand::SeedableRng;
        let p = [0.4, 0.3, 0.2, 0.1];
        let dist = ProposalDistribution(p.to_vec());
        let subsets = combinations(4, 2);
        let mut counts = vec![0usize; subsets.len()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        for _ in 0..draws {
            let (mut pos, _) = sample_positions(&dist, 2, &mut rng).unwrap();
            pos.sort_unstable();
            counts[subsets.iter().position(|s| *s == pos).unwrap()] += 1;
        }
        for (s, c) in subsets.iter().zip(&counts) {
            let q = subset_probability(&p, s);
            let sd = (q * (1.0 - q) / draws as f64).sqrt();
            let f = *c as f64 / draws as f64;
            assert!((f - q).abs() <= 4.0 * sd, "{s:?}: {f} vs {q}");
        }
    }
}
