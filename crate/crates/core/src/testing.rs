//! Calibrated tests: the MCAR combination test (wild bootstrap on complete
//! pairs, permutations on incomplete records) and the IPW-weighted MAR test.
//!
//! Replica `b` draws from its own ChaCha stream derived from `(seed, b)`,
//! so serial and parallel runs produce identical replicas.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{p_value, PairedDataset, TestResult};
use crate::error::{Error, Result};
use crate::kernel::{gram_symmetric, GramMatrix, KernelSpec};
use crate::missingness::{self, IpwOptions, IpwWeights, LogisticModel};
use crate::mmd::{self, MmdValue, PairGram};

/// Random stream for replica `index` under a master seed.
pub fn replica_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Default dependence parameter `l = sqrt(n1)`.
pub fn default_l_param(n1: usize) -> f64 {
    (n1.max(1) as f64).sqrt()
}

/// AR(1) multiplier sequence `w_i = e^{-1/l} w_{i-1} + sqrt(1 - e^{-2/l}) eps_i`
/// started from `w_0 ~ N(0, 1)`; every `w_i` is marginally standard normal.
pub fn wild_weights<R: Rng + ?Sized>(n1: usize, l: f64, rng: &mut R) -> Result<Vec<f64>> {
    if n1 == 0 {
        return Err(Error::InvalidParameter("wild bootstrap needs n1 >= 1".into()));
    }
    check_l(l)?;
    let w0: f64 = rng.sample(StandardNormal);
    let eps: Vec<f64> = (0..n1).map(|_| rng.sample(StandardNormal)).collect();
    Ok(wild_weights_from_noise(w0, &eps, l))
}

/// The recursion with explicit starting value and innovations.
pub fn wild_weights_from_noise(w0: f64, eps: &[f64], l: f64) -> Vec<f64> {
    let rho = (-1.0 / l).exp();
    let innov = (1.0 - (-2.0 / l).exp()).sqrt();
    let mut prev = w0;
    eps.iter()
        .map(|&e| {
            prev = rho * prev + innov * e;
            prev
        })
        .collect()
}

fn check_l(l: f64) -> Result<()> {
    if l.is_finite() && l > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("l must be > 0, got {l}")))
    }
}

/// Settings for [`mcar_test`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McarConfig {
    pub alpha: f64,
    pub bootstrap: usize,
    pub l_param: f64,
    pub seed: u64,
    pub plus_one: bool,
}

impl McarConfig {
    /// `alpha = n1 / n` (or 1 when an incomplete block is empty),
    /// `l = sqrt(n1)`, 2000 replicas.
    pub fn defaults_for(ds: &PairedDataset, seed: u64) -> Self {
        Self {
            alpha: default_alpha(ds),
            bootstrap: 2000,
            l_param: default_l_param(ds.n1()),
            seed,
            plus_one: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.bootstrap == 0 {
            return Err(Error::InvalidParameter("bootstrap count must be >= 1".into()));
        }
        check_l(self.l_param)
    }
}

pub fn default_alpha(ds: &PairedDataset) -> f64 {
    if ds.n2() == 0 || ds.n3() == 0 {
        1.0
    } else {
        ds.n1() as f64 / ds.n() as f64
    }
}

/// Precomputed kernel blocks for the MCAR statistic and its replicas.
///
/// Pooled index layout: complete firsts `[0, n1)`, complete seconds
/// `[n1, 2 n1)`, first-only, then second-only.
#[derive(Debug, Clone)]
pub struct McarProblem {
    n1: usize,
    n2: usize,
    n3: usize,
    gram: GramMatrix,
    bracket: Vec<f64>,
}

impl McarProblem {
    pub fn new(ds: &PairedDataset, spec: &KernelSpec) -> Result<Self> {
        let gram = gram_symmetric(&ds.pooled(), spec)?;
        let n1 = ds.n1();
        let mut bracket = Vec::with_capacity(n1 * n1);
        for i in 0..n1 {
            for j in 0..n1 {
                bracket.push(gram.get(i, j) + gram.get(n1 + i, n1 + j) - 2.0 * gram.get(i, n1 + j));
            }
        }
        Ok(Self {
            n1,
            n2: ds.n2(),
            n3: ds.n3(),
            gram,
            bracket,
        })
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if alpha > 0.0 && self.n1 == 0 {
            return Err(Error::NoCompletePairs { alpha });
        }
        if alpha < 1.0 && (self.n2 == 0 || self.n3 == 0) {
            return Err(Error::IncompatibleAlpha {
                alpha,
                n2: self.n2,
                n3: self.n3,
            });
        }
        Ok(())
    }

    fn complete_idx(&self) -> (Vec<usize>, Vec<usize>) {
        ((0..self.n1).collect(), (self.n1..2 * self.n1).collect())
    }

    fn incomplete_idx(&self) -> Vec<usize> {
        (2 * self.n1..2 * self.n1 + self.n2 + self.n3).collect()
    }

    /// Paired-block statistic over complete pairs.
    pub fn paired_statistic(&self) -> Result<MmdValue> {
        let (a, b) = self.complete_idx();
        mmd::two_sample_indexed(&self.gram, &a, &b)
    }

    /// Two-sample statistic over first-only versus second-only records.
    pub fn incomplete_statistic(&self) -> Result<MmdValue> {
        let inc = self.incomplete_idx();
        let (a, b) = inc.split_at(self.n2);
        mmd::two_sample_indexed(&self.gram, a, b)
    }

    /// `alpha * T1 + (1 - alpha) * T2`; a term with zero weight is skipped.
    pub fn statistic(&self, alpha: f64) -> Result<f64> {
        self.check_alpha(alpha)?;
        let mut t = 0.0;
        if alpha > 0.0 {
            t += alpha * self.paired_statistic()?.value();
        }
        if alpha < 1.0 {
            t += (1.0 - alpha) * self.incomplete_statistic()?.value();
        }
        Ok(t)
    }

    /// Replica from explicit multipliers and an explicit relabeling:
    /// `first_group` holds positions (in `0..n2+n3`) of the pooled
    /// incomplete records assigned to the first timepoint.
    pub fn replica_with(&self, alpha: f64, weights: &[f64], first_group: &[usize]) -> Result<f64> {
        self.check_alpha(alpha)?;
        let mut t = 0.0;
        if alpha > 0.0 {
            if weights.len() != self.n1 {
                return Err(Error::DimensionMismatch {
                    expected: self.n1,
                    found: weights.len(),
                });
            }
            let (q, scale) = mmd::quadratic_form(&self.bracket, weights);
            let nn = (self.n1 * self.n1) as f64;
            t += alpha * MmdValue::from_raw(q / nn, scale / nn)?.value();
        }
        if alpha < 1.0 {
            let total = self.n2 + self.n3;
            if first_group.len() != self.n2 || first_group.iter().any(|&p| p >= total) {
                return Err(Error::InvalidParameter(format!(
                    "relabeling must pick {} of {} incomplete records",
                    self.n2, total
                )));
            }
            let mut in_first = vec![false; total];
            for &p in first_group {
                in_first[p] = true;
            }
            let base = 2 * self.n1;
            let a: Vec<usize> = (0..total).filter(|&p| in_first[p]).map(|p| base + p).collect();
            let b: Vec<usize> = (0..total).filter(|&p| !in_first[p]).map(|p| base + p).collect();
            if a.len() != self.n2 {
                return Err(Error::InvalidParameter("relabeling repeats a record".into()));
            }
            t += (1.0 - alpha) * mmd::two_sample_indexed(&self.gram, &a, &b)?.value();
        }
        Ok(t)
    }

    /// One bootstrap replica: AR(1) multipliers on the complete block and a
    /// uniformly random relabeling of the incomplete records into groups of
    /// the original sizes.
    pub fn replica<R: Rng + ?Sized>(&self, alpha: f64, l: f64, rng: &mut R) -> Result<f64> {
        self.check_alpha(alpha)?;
        let weights = if alpha > 0.0 {
            wild_weights(self.n1, l, rng)?
        } else {
            Vec::new()
        };
        let first: Vec<usize> = if alpha < 1.0 {
            random_relabeling(self.n2, self.n3, rng)
        } else {
            Vec::new()
        };
        self.replica_with(alpha, &weights, &first)
    }
}

/// Positions (in `0..n2+n3`) of the pooled incomplete records that a
/// uniformly random relabeling assigns to the first timepoint.
pub fn random_relabeling<R: Rng + ?Sized>(n2: usize, n3: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..n2 + n3).collect();
    pos.shuffle(rng);
    pos.truncate(n2);
    pos
}

pub fn mcar_statistic(ds: &PairedDataset, spec: &KernelSpec, alpha: f64) -> Result<f64> {
    McarProblem::new(ds, spec)?.statistic(alpha)
}

pub fn mcar_bootstrap_replica<R: Rng + ?Sized>(
    ds: &PairedDataset,
    spec: &KernelSpec,
    alpha: f64,
    l: f64,
    rng: &mut R,
) -> Result<f64> {
    McarProblem::new(ds, spec)?.replica(alpha, l, rng)
}

pub fn mcar_test(ds: &PairedDataset, spec: &KernelSpec, config: &McarConfig) -> Result<TestResult> {
    config.validate()?;
    let problem = McarProblem::new(ds, spec)?;
    let statistic = problem.statistic(config.alpha)?;
    let replicas = (0..config.bootstrap)
        .into_par_iter()
        .map(|b| problem.replica(config.alpha, config.l_param, &mut replica_rng(config.seed, b as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestResult {
        statistic,
        p_value: p_value(statistic, &replicas, config.plus_one),
        replicas,
        alpha: Some(config.alpha),
        bootstrap: config.bootstrap,
        l_param: config.l_param,
        bandwidth: spec.bandwidth(),
        seed: config.seed,
        plus_one: config.plus_one,
    })
}

/// Settings for [`mar_test`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarConfig {
    pub bootstrap: usize,
    /// AR(1) dependence of the multipliers; `None` or `0` gives
    /// independent multipliers.
    pub l_param: Option<f64>,
    /// Subtract the multipliers' mean in every replica.
    pub centered: bool,
    pub seed: u64,
    pub plus_one: bool,
    pub ipw: IpwOptions,
}

impl MarConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            bootstrap: 2000,
            l_param: None,
            centered: true,
            seed,
            plus_one: false,
            ipw: IpwOptions::default(),
        }
    }
}

/// Result of the MAR test together with the fitted response model.
#[derive(Debug, Clone)]
pub struct MarOutcome {
    pub result: TestResult,
    pub weights: IpwWeights,
    pub model: LogisticModel,
}

/// IPW-weighted statistic over the complete block.
pub fn mar_statistic(ds: &PairedDataset, weights: &[f64], spec: &KernelSpec) -> Result<f64> {
    Ok(mmd::mmd_weighted(ds.complete(), weights, spec)?.value())
}

/// Fits the response model, derives IPW weights, and calibrates the
/// weighted statistic with wild-bootstrap replicas
/// `sum_ij w_i w_j om_i om_j h_ij` that keep the weights `om` fixed.
///
/// By default the multipliers `w` are independent and centered. Centering
/// cancels the constant and linear parts of `h` that a false null leaves in
/// the replicas, which would otherwise drown the signal.
pub fn mar_test(ds: &PairedDataset, spec: &KernelSpec, config: &MarConfig) -> Result<MarOutcome> {
    let (model, weights) = missingness::estimate_ipw(ds, &config.ipw)?;
    let result = mar_test_with_weights(ds, spec, weights.complete(), config)?;
    Ok(MarOutcome {
        result,
        weights,
        model,
    })
}

/// The MAR test with weights supplied by the caller (one per complete pair).
pub fn mar_test_with_weights(
    ds: &PairedDataset,
    spec: &KernelSpec,
    weights: &[f64],
    config: &MarConfig,
) -> Result<TestResult> {
    let n1 = ds.n1();
    if n1 < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n1 });
    }
    if config.bootstrap == 0 {
        return Err(Error::InvalidParameter("bootstrap count must be >= 1".into()));
    }
    let l = config.l_param.unwrap_or(0.0);
    if !(l.is_finite() && l >= 0.0) {
        return Err(Error::InvalidParameter(format!("l must be >= 0, got {l}")));
    }
    mmd::check_weights(weights, n1)?;
    let bracket = PairGram::new(ds.complete(), spec)?.bracket();
    let (t, scale) = mmd::quadratic_form(&bracket, weights);
    let statistic = MmdValue::from_raw(t, scale)?.value();
    let replicas = (0..config.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = replica_rng(config.seed, b as u64);
            let w0: f64 = rng.sample(StandardNormal);
            let eps: Vec<f64> = (0..n1).map(|_| rng.sample(StandardNormal)).collect();
            let mut w = wild_weights_from_noise(w0, &eps, l);
            if config.centered {
                let m = w.iter().sum::<f64>() / n1 as f64;
                w.iter_mut().for_each(|x| *x -= m);
            }
            let u: Vec<f64> = w.iter().zip(weights).map(|(a, b)| a * b).collect();
            let (q, scale) = mmd::quadratic_form(&bracket, &u);
            Ok(MmdValue::from_raw(q, scale)?.value())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestResult {
        statistic,
        p_value: p_value(statistic, &replicas, config.plus_one),
        replicas,
        alpha: None,
        bootstrap: config.bootstrap,
        l_param: l,
        bandwidth: spec.bandwidth(),
        seed: config.seed,
        plus_one: config.plus_one,
    })
}
