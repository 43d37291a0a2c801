//! Biased (V-statistic) maximum mean discrepancy estimates.
//!
//! Feature maps are never formed; everything reduces Gram-matrix entries.
//! Block sums of raw kernel values go through [`KernelSum`], a fixed-point
//! accumulator whose result does not depend on summation order. That makes
//! `mmd_two_sample(A, B)` and `mmd_two_sample(B, A)` bit-identical and lets
//! a permutation replica that reproduces the observed split tie with the
//! observed statistic exactly.

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::kernel::{gram, GramMatrix, KernelSpec};

/// Negative values down to this (relative) size are round-off.
const ROUNDOFF: f64 = 1e-12;

/// A nonnegative MMD value.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MmdValue(f64);

impl MmdValue {
    /// Clamps small negative round-off to zero. `scale` is the magnitude of
    /// the terms that were summed; values below `-1e-12 * max(1, scale)`
    /// are reported as an internal-consistency error.
    pub fn from_raw(value: f64, scale: f64) -> Result<Self> {
        if value >= 0.0 {
            Ok(Self(value))
        } else if value >= -ROUNDOFF * scale.max(1.0) {
            Ok(Self(0.0))
        } else {
            Err(Error::NegativeStatistic(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Exact accumulator for values in `[-2^36, 2^36]` at a resolution of
/// `2^-90`. Each term is truncated once to fixed point; the integer sum
/// is then independent of order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct KernelSum(i128);

const FIXED_SCALE: f64 = (1u128 << 90) as f64;

impl KernelSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        debug_assert!(x.abs() <= 68_719_476_736.0, "term {x} out of range");
        self.0 += (x * FIXED_SCALE) as i128;
    }

    pub(crate) fn value(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

/// Sum of `g[i][j]` over `i` in `rows`, `j` in `cols`.
pub(crate) fn block_sum(g: &GramMatrix, rows: &[usize], cols: &[usize]) -> KernelSum {
    let mut acc = KernelSum::default();
    for &i in rows {
        let row = g.row(i);
        for &j in cols {
            acc.add(row[j]);
        }
    }
    acc
}

/// Two-sample V-statistic over index sets of a pooled Gram matrix.
pub(crate) fn two_sample_indexed(g: &GramMatrix, a: &[usize], b: &[usize]) -> Result<MmdValue> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let (p, q) = (a.len() as f64, b.len() as f64);
    let saa = block_sum(g, a, a).value();
    let sbb = block_sum(g, b, b).value();
    let sab = symmetric_cross(g, a, b).value();
    let raw = saa / (p * p) + sbb / (q * q) - 2.0 * sab / (p * q);
    MmdValue::from_raw(raw, 4.0)
}

/// Cross sum that reads whichever triangle is canonical for each pair, so
/// swapping `a` and `b` yields the identical integer sum even if `g` were
/// only approximately symmetric.
fn symmetric_cross(g: &GramMatrix, a: &[usize], b: &[usize]) -> KernelSum {
    let mut acc = KernelSum::default();
    for &i in a {
        for &j in b {
            acc.add(if i <= j { g.get(i, j) } else { g.get(j, i) });
        }
    }
    acc
}

/// `(1/p^2) sum k(a,a') + (1/q^2) sum k(b,b') - (2/pq) sum k(a,b)`.
pub fn mmd_two_sample(a: &[&Observation], b: &[&Observation], spec: &KernelSpec) -> Result<MmdValue> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut pooled = a.to_vec();
    pooled.extend_from_slice(b);
    let g = crate::kernel::gram_symmetric(&pooled, spec)?;
    let ia: Vec<usize> = (0..a.len()).collect();
    let ib: Vec<usize> = (a.len()..pooled.len()).collect();
    two_sample_indexed(&g, &ia, &ib)
}

/// Gram blocks of a set of complete pairs: `k(x1_i, x1_j)`, `k(x2_i, x2_j)`
/// and the cross block `k(x1_i, x2_j)`.
#[derive(Debug, Clone)]
pub(crate) struct PairGram {
    pub n: usize,
    pub k11: GramMatrix,
    pub k22: GramMatrix,
    pub k12: GramMatrix,
}

impl PairGram {
    pub(crate) fn new(pairs: &[(Observation, Observation)], spec: &KernelSpec) -> Result<Self> {
        let x1: Vec<&Observation> = pairs.iter().map(|(a, _)| a).collect();
        let x2: Vec<&Observation> = pairs.iter().map(|(_, b)| b).collect();
        Ok(Self {
            n: pairs.len(),
            k11: crate::kernel::gram_symmetric(&x1, spec)?,
            k22: crate::kernel::gram_symmetric(&x2, spec)?,
            k12: gram(&x1, &x2, spec)?,
        })
    }

    /// Bracket `h_ij = k(x1_i, x1_j) + k(x2_i, x2_j) - 2 k(x1_i, x2_j)`, row-major.
    pub(crate) fn bracket(&self) -> Vec<f64> {
        let n = self.n;
        let mut h = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                h.push(self.k11.get(i, j) + self.k22.get(i, j) - 2.0 * self.k12.get(i, j));
            }
        }
        h
    }

    pub(crate) fn paired(&self) -> Result<MmdValue> {
        if self.n == 0 {
            return Err(Error::EmptySample);
        }
        let idx: Vec<usize> = (0..self.n).collect();
        let s11 = block_sum(&self.k11, &idx, &idx).value();
        let s22 = block_sum(&self.k22, &idx, &idx).value();
        let s12 = block_sum(&self.k12, &idx, &idx).value();
        let nn = (self.n * self.n) as f64;
        MmdValue::from_raw((s11 + s22 - 2.0 * s12) / nn, 4.0)
    }
}

/// `(1/n^2) sum_ij [k(x1_i,x1_j) + k(x2_i,x2_j) - 2 k(x1_i,x2_j)]`.
pub fn mmd_paired(pairs: &[(Observation, Observation)], spec: &KernelSpec) -> Result<MmdValue> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    PairGram::new(pairs, spec)?.paired()
}

/// Quadratic form `sum_ij u_i u_j h_ij` over a row-major bracket matrix,
/// reduced in a fixed order. Returns the value and the sum of absolute terms.
pub(crate) fn quadratic_form(h: &[f64], u: &[f64]) -> (f64, f64) {
    let n = u.len();
    let mut total = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let row = &h[i * n..(i + 1) * n];
        let mut inner = 0.0;
        let mut inner_abs = 0.0;
        for (hij, uj) in row.iter().zip(u) {
            inner += hij * uj;
            inner_abs += (hij * uj).abs();
        }
        total += u[i] * inner;
        scale += u[i].abs() * inner_abs;
    }
    (total, scale)
}

pub(crate) fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    Ok(())
}

/// `sum_ij w_i w_j [k(x1_i,x1_j) + k(x2_i,x2_j) - 2 k(x1_i,x2_j)]`.
pub fn mmd_weighted(
    pairs: &[(Observation, Observation)],
    weights: &[f64],
    spec: &KernelSpec,
) -> Result<MmdValue> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    check_weights(weights, pairs.len())?;
    let h = PairGram::new(pairs, spec)?.bracket();
    let (v, scale) = quadratic_form(&h, weights);
    MmdValue::from_raw(v, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_eval, Metric};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> KernelSpec {
        KernelSpec::gaussian(1.5, Metric::Euclidean).unwrap()
    }

    fn sc(xs: &[f64]) -> Vec<Observation> {
        xs.iter().map(|&x| Observation::Scalar(x)).collect()
    }

    fn pairs(a: &[f64], b: &[f64]) -> Vec<(Observation, Observation)> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (Observation::Scalar(x), Observation::Scalar(y)))
            .collect()
    }

    fn k(x: f64, y: f64) -> f64 {
        kernel_eval(&Observation::Scalar(x), &Observation::Scalar(y), &spec()).unwrap()
    }

    // Naive oracles, written straight from the double-sum definitions.
    fn naive_two_sample(a: &[f64], b: &[f64]) -> f64 {
        let (p, q) = (a.len() as f64, b.len() as f64);
        let mut s = 0.0;
        for &x in a {
            for &y in a {
                s += k(x, y) / (p * p);
            }
        }
        for &x in b {
            for &y in b {
                s += k(x, y) / (q * q);
            }
        }
        for &x in a {
            for &y in b {
                s -= 2.0 * k(x, y) / (p * q);
            }
        }
        s
    }

    fn naive_weighted(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                s += w[i] * w[j] * (k(a[i], a[j]) + k(b[i], b[j]) - 2.0 * k(a[i], b[j]));
            }
        }
        s
    }

    fn refs(v: &[Observation]) -> Vec<&Observation> {
        v.iter().collect()
    }

    #[test]
    fn identical_samples_give_zero() {
        let a = sc(&[0.1, 0.5, -2.0]);
        assert!(mmd_two_sample(&refs(&a), &refs(&a), &spec()).unwrap().value() <= 1e-12);
        let p = pairs(&[0.1, 0.5, -2.0], &[0.1, 0.5, -2.0]);
        assert!(mmd_paired(&p, &spec()).unwrap().value() <= 1e-12);
        assert!(mmd_weighted(&p, &[0.3, 1.0, 2.0], &spec()).unwrap().value() <= 1e-12);
    }

    #[test]
    fn singleton_expansion() {
        let (a, b) = (sc(&[0.3]), sc(&[1.7]));
        let expect = 2.0 - 2.0 * k(0.3, 1.7);
        assert_abs_diff_eq!(mmd_two_sample(&refs(&a), &refs(&b), &spec()).unwrap().value(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(mmd_paired(&pairs(&[0.3], &[1.7]), &spec()).unwrap().value(), expect, epsilon = 1e-15);
    }

    #[test]
    fn random_instances_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..3.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let two = mmd_two_sample(&refs(&sc(&a)), &refs(&sc(&b)), &spec()).unwrap().value();
            assert_abs_diff_eq!(two, naive_two_sample(&a, &b), epsilon = 1e-12);
            let paired = mmd_paired(&pairs(&a, &b), &spec()).unwrap().value();
            assert_abs_diff_eq!(paired, two, epsilon = 1e-12);
            let weighted = mmd_weighted(&pairs(&a, &b), &w, &spec()).unwrap().value();
            assert_abs_diff_eq!(weighted, naive_weighted(&a, &b, &w), epsilon = 1e-12);
            let uniform = mmd_weighted(&pairs(&a, &b), &[1.0 / 6.0; 6], &spec()).unwrap().value();
            assert_abs_diff_eq!(uniform, paired, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let a = sc(&[1.0]);
        assert!(matches!(mmd_two_sample(&[], &refs(&a), &spec()), Err(Error::EmptySample)));
        assert!(matches!(mmd_paired(&[], &spec()), Err(Error::EmptySample)));
        let p = pairs(&[0.0, 1.0], &[1.0, 2.0]);
        assert!(matches!(mmd_weighted(&p, &[0.0, 0.0], &spec()), Err(Error::InvalidWeights(_))));
        assert!(matches!(mmd_weighted(&p, &[1.0, -0.1], &spec()), Err(Error::InvalidWeights(_))));
        assert!(mmd_weighted(&p, &[1.0], &spec()).is_err());
    }

    #[test]
    fn clamp_policy() {
        assert_eq!(MmdValue::from_raw(-1e-13, 1.0).unwrap().value(), 0.0);
        assert!(MmdValue::from_raw(-1e-9, 1.0).is_err());
        assert_eq!(MmdValue::from_raw(0.25, 1.0).unwrap().value(), 0.25);
    }

    #[test]
    fn kernel_sum_is_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let mut fwd = KernelSum::default();
        xs.iter().for_each(|&x| fwd.add(x));
        let mut rev = KernelSum::default();
        xs.iter().rev().for_each(|&x| rev.add(x));
        assert_eq!(fwd, rev);
        assert_abs_diff_eq!(fwd.value(), xs.iter().sum::<f64>(), epsilon = 1e-10);
    }

    proptest! {
        #[test]
        fn statistics_nonnegative_and_symmetric(
            a in prop::collection::vec(-3.0f64..3.0, 1..8),
            b in prop::collection::vec(-3.0f64..3.0, 1..8),
        ) {
            let (oa, ob) = (sc(&a), sc(&b));
            let ab = mmd_two_sample(&refs(&oa), &refs(&ob), &spec()).unwrap().value();
            let ba = mmd_two_sample(&refs(&ob), &refs(&oa), &spec()).unwrap().value();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn weighted_scaling_and_permutation(
            data in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..2.0), 1..8),
            c in 0.1f64..5.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let a: Vec<f64> = data.iter().map(|d| d.0).collect();
            let b: Vec<f64> = data.iter().map(|d| d.1).collect();
            let w: Vec<f64> = data.iter().map(|d| d.2).collect();
            let base = mmd_weighted(&pairs(&a, &b), &w, &spec()).unwrap().value();
            let scaled_w: Vec<f64> = w.iter().map(|x| x * c).collect();
            let scaled = mmd_weighted(&pairs(&a, &b), &scaled_w, &spec()).unwrap().value();
            prop_assert!((scaled - c * c * base).abs() <= 1e-10 * (1.0 + c * c));

            let mut order: Vec<usize> = (0..a.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pa: Vec<f64> = order.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = order.iter().map(|&i| b[i]).collect();
            let pw: Vec<f64> = order.iter().map(|&i| w[i]).collect();
            let permuted = mmd_weighted(&pairs(&pa, &pb), &pw, &spec()).unwrap().value();
            prop_assert!((permuted - base).abs() <= 1e-12);
            let p0 = mmd_paired(&pairs(&a, &b), &spec()).unwrap().value();
            let p1 = mmd_paired(&pairs(&pa, &pb), &spec()).unwrap().value();
            prop_assert_eq!(p0.to_bits(), p1.to_bits());
        }
    }
}
