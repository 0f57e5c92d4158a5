use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared MMD estimates under an RBF kernel whose bandwidth is the median
/// pairwise distance of the pooled sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased estimate; can fall slightly below zero when the
    /// distributions agree.
    pub unbiased: f64,
    pub biased: f64,
    pub bandwidth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    /// `(1 + #{permuted ≥ observed}) / (1 + permutations)`.
    pub p_value: f64,
    pub permutations: usize,
    pub bandwidth: f64,
}

struct Pooled {
    kernel: Vec<f64>,
    n: usize,
    bandwidth: f64,
}

fn check(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("MMD needs at least two points per set"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::invalid("MMD sets must share one dimensionality"));
    }
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    let mid = xs.len() / 2;
    let (_, m, _) = xs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *m;
    if xs.len() % 2 == 1 {
        hi
    } else {
        let lo = xs[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn pooled(a: &[Vec<f64>], b: &[Vec<f64>]) -> Pooled {
    let pts: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pts.len();
    let mut sq = vec![0.0; n * n];
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = pts[i].iter().zip(pts[j]).map(|(x, y)| (x - y).powi(2)).sum();
            sq[i * n + j] = d2;
            sq[j * n + i] = d2;
            dists.push(d2.sqrt());
        }
    }
    let mut bandwidth = median(dists);
    if bandwidth <= 0.0 {
        bandwidth = 1.0;
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let kernel = sq.into_iter().map(|d2| (-g * d2).exp()).collect();
    Pooled { kernel, n, bandwidth }
}

/// Unbiased and biased estimates for the split `idx[..m]` vs `idx[m..]`.
fn estimates(p: &Pooled, idx: &[usize], m: usize) -> (f64, f64) {
    let n = p.n;
    let k = |i: usize, j: usize| p.kernel[idx[i] * n + idx[j]];
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            match (i < m, j < m) {
                (true, true) => xx += k(i, j),
                (false, false) => yy += k(i, j),
                (true, false) => xy += k(i, j),
                (false, true) => {}
            }
        }
    }
    let (mf, nf) = (m as f64, (n - m) as f64);
    let unbiased = xx / (mf * (mf - 1.0)) + yy / (nf * (nf - 1.0)) - 2.0 * xy / (mf * nf);
    // the diagonal of an RBF kernel is 1
    let biased = (xx + mf) / (mf * mf) + (yy + nf) / (nf * nf) - 2.0 * xy / (mf * nf);
    (unbiased, biased)
}

pub fn mmd_estimate(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdEstimate> {
    check(a, b)?;
    let p = pooled(a, b);
    let idx: Vec<usize> = (0..p.n).collect();
    let (unbiased, biased) = estimates(&p, &idx, a.len());
    Ok(MmdEstimate { unbiased, biased, bandwidth: p.bandwidth })
}

/// Unbiased squared MMD between two point sets.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    Ok(mmd_estimate(a, b)?.unbiased)
}

/// Two-sample permutation test on the unbiased statistic. The bandwidth is
/// fixed from the pooled sample, which every permutation shares.
pub fn mmd_permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<PermutationTest> {
    check(a, b)?;
    let p = pooled(a, b);
    let mut idx: Vec<usize> = (0..p.n).collect();
    let m = a.len();
    let (observed, _) = estimates(&p, &idx, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        if estimates(&p, &idx, m).0 >= observed {
            exceed += 1;
        }
    }
    Ok(PermutationTest {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
        bandwidth: p.bandwidth,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![mean + { let x: f64 = StandardNormal.sample(rng); x }]).collect()
    }

    /// Direct O(n²) evaluation with an explicit bandwidth.
    fn reference_unbiased(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| (-x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * sigma * sigma)).exp();
        let mean_off = |s: &[Vec<f64>]| {
            let mut t = 0.0;
            for (i, x) in s.iter().enumerate() {
                for (j, y) in s.iter().enumerate() {
                    if i != j {
                        t += k(x, y);
                    }
                }
            }
            t / (s.len() * (s.len() - 1)) as f64
        };
        let cross: f64 = a.iter().flat_map(|x| b.iter().map(move |y| k(x, y))).sum::<f64>() / (a.len() * b.len()) as f64;
        mean_off(a) + mean_off(b) - 2.0 * cross
    }

    #[test]
    fn identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian(&mut rng, 200, 0.0);
        let e = mmd_estimate(&a, &a).unwrap();
        assert!(e.biased.abs() < 1e-12);
        assert!(e.unbiased <= 1e-12);
    }

    #[test]
    fn matches_the_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(&mut rng, 30, 0.0);
        let b = gaussian(&mut rng, 40, 0.7);
        let e = mmd_estimate(&a, &b).unwrap();
        assert!((e.unbiased - reference_unbiased(&a, &b, e.bandwidth)).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_is_the_median_distance() {
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![3.0], vec![7.0]];
        // distances 1, 3, 7, 2, 6, 4 → median of six values is (3 + 4) / 2
        assert_eq!(mmd_estimate(&a, &b).unwrap().bandwidth, 3.5);
    }

    #[test]
    fn separated_gaussians_stand_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 1000, 0.0);
        let b = gaussian(&mut rng, 1000, 5.0);
        let same = gaussian(&mut rng, 1000, 0.0);
        let far = mmd(&a, &b).unwrap();
        let near = mmd(&a, &same).unwrap();
        assert!(far >= 10.0 * near.abs(), "{far} vs {near}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(mmd(&[vec![0.0], vec![1.0]], &[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(mmd(&[vec![0.0]], &[vec![0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn permutation_p_values_are_uniform_under_the_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 200;
        let mut below = [0usize; 4];
        for trial in 0..trials {
            let a = gaussian(&mut rng, 20, 0.0);
            let b = gaussian(&mut rng, 20, 0.0);
            let p = mmd_permutation_test(&a, &b, 99, trial).unwrap().p_value;
            for (i, q) in [0.1, 0.25, 0.5, 0.75].iter().enumerate() {
                below[i] += usize::from(p <= *q);
            }
        }
        for (count, q) in below.iter().zip([0.1, 0.25, 0.5, 0.75]) {
            let frac = *count as f64 / trials as f64;
            let se = (q * (1.0 - q) / trials as f64).sqrt();
            assert!((frac - q).abs() <= 3.0 * se + 0.01, "P(p ≤ {q}) = {frac}");
        }
    }

    #[test]
    fn permutation_test_detects_a_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(&mut rng, 100, 0.0);
        let b = gaussian(&mut rng, 100, 1.0);
        let t = mmd_permutation_test(&a, &b, 200, 1).unwrap();
        assert!(t.p_value < 0.01);
        assert_eq!(t, mmd_permutation_test(&a, &b, 200, 1).unwrap());
    }

    proptest! {
        #[test]
        fn mmd_is_symmetric(
            a in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..20),
            b in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..20),
        ) {
            let (x, y) = (mmd(&a, &b).unwrap(), mmd(&b, &a).unwrap());
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
