//! Response-probability model and inverse-probability weights.
//!
//! The classifier predicts whether a record's SECOND element is observed,
//! given features of its first element (or user covariates). Complete pairs
//! get `1 / (n * max(pi_obs, floor))`, everything else gets zero.

use nalgebra::{DMatrix, DVector};

use crate::data::{Observation, PairedDataset};
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;

/// Fitted logistic regression; `coefficients[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    /// `P(y = 1 | x)` for one feature row (without the intercept column).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let eta = self.coefficients[0]
            + self.coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        sigmoid(eta)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn penalized_loglik(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let ll: f64 = eta.iter().zip(y.iter()).map(|(e, yi)| yi * e - log1pexp(*e)).sum();
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    ll - 0.5 * ridge * penalty
}

/// Ridge-penalized logistic regression by iteratively reweighted least
/// squares (Newton steps with step halving). The intercept is not penalized.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool], ridge: f64) -> Result<LogisticModel> {
    let n = features.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
    }
    let p = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().find(|r| r.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: bad.len(),
        });
    }
    if n < p + 1 {
        return Err(Error::TooFewPoints { needed: p + 1, got: n });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateLabels);
    }

    let d = p + 1;
    let x = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let mut penalty = DMatrix::<f64>::identity(d, d) * ridge;
    penalty[(0, 0)] = 0.0;

    let mut beta = DVector::<f64>::zeros(d);
    let mut ll = penalized_loglik(&x, &y, &beta, ridge);
    for iter in 1..=MAX_ITER {
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let mut grad = x.transpose() * (&y - &mu);
        grad -= &penalty * &beta;
        let xw = DMatrix::from_fn(n, d, |i, j| x[(i, j)] * w[i]);
        let hess = x.transpose() * xw + &penalty;
        let step = hess
            .cholesky()
            .ok_or(Error::Separation { iterations: iter })?
            .solve(&grad);
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Separation { iterations: iter });
        }

        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut cand_ll = penalized_loglik(&x, &y, &candidate, ridge);
        let mut halvings = 0;
        while cand_ll < ll - 1e-12 * ll.abs().max(1.0) && halvings < 30 {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            cand_ll = penalized_loglik(&x, &y, &candidate, ridge);
            halvings += 1;
        }
        let change = (&step * scale).amax();
        beta = candidate;
        ll = cand_ll;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Separation { iterations: iter });
        }
        if change < TOL {
            return Ok(LogisticModel {
                coefficients: beta.iter().copied().collect(),
                converged: true,
                iterations: iter,
            });
        }
    }
    Err(Error::Separation { iterations: MAX_ITER })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightNormalization {
    /// `1 / (n * pi)` as is.
    Raw,
    /// Rescaled to sum to one.
    SelfNormalized,
}

/// Options for estimating IPW weights from a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwOptions {
    pub pi_floor: f64,
    pub ridge: f64,
    pub normalization: WeightNormalization,
}

impl Default for IpwOptions {
    fn default() -> Self {
        Self {
            pi_floor: 0.01,
            ridge: 1e-6,
            normalization: WeightNormalization::Raw,
        }
    }
}

/// Weights over the records with an observed first element, layout order;
/// the first `n1` entries belong to the complete pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct IpwWeights {
    per_record: Vec<f64>,
    n_complete: usize,
    normalization: WeightNormalization,
}

impl IpwWeights {
    pub fn complete(&self) -> &[f64] {
        &self.per_record[..self.n_complete]
    }

    pub fn per_record(&self) -> &[f64] {
        &self.per_record
    }

    pub fn normalization(&self) -> WeightNormalization {
        self.normalization
    }

    pub fn total(&self) -> f64 {
        self.per_record.iter().sum()
    }
}

/// `observed_j / (n * max(pi_j, floor))`, optionally rescaled to sum to one.
pub fn weights_from_probabilities(
    observed: &[bool],
    pi_obs: &[f64],
    floor: f64,
    normalization: WeightNormalization,
) -> Result<Vec<f64>> {
    if observed.len() != pi_obs.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            found: pi_obs.len(),
        });
    }
    if !(floor > 0.0 && floor < 0.5) {
        return Err(Error::InvalidParameter(format!("pi floor must lie in (0, 0.5), got {floor}")));
    }
    if let Some(p) = pi_obs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
    }
    let n = observed.len() as f64;
    let mut w: Vec<f64> = observed
        .iter()
        .zip(pi_obs)
        .map(|(&o, &p)| if o { 1.0 / (n * p.max(floor)) } else { 0.0 })
        .collect();
    if normalization == WeightNormalization::SelfNormalized {
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(w)
}

/// IPW weights for a dataset from per-record observation probabilities
/// (one per record with an observed first element, layout order).
pub fn ipw_weights(
    ds: &PairedDataset,
    pi_obs: &[f64],
    floor: f64,
    normalization: WeightNormalization,
) -> Result<IpwWeights> {
    let observed = observation_labels(ds);
    let per_record = weights_from_probabilities(&observed, pi_obs, floor, normalization)?;
    if !per_record.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidWeights("no complete pairs to weight".into()));
    }
    Ok(IpwWeights {
        per_record,
        n_complete: ds.n1(),
        normalization,
    })
}

/// `true` where the second element is observed, over the records with an
/// observed first element.
pub fn observation_labels(ds: &PairedDataset) -> Vec<bool> {
    std::iter::repeat_n(true, ds.n1())
        .chain(std::iter::repeat_n(false, ds.n2()))
        .collect()
}

/// Mean, standard deviation and skewness of a set of values.
fn moment_summary(values: &[f64]) -> [f64; 3] {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let sd = m2.sqrt();
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    [mean, sd, skew]
}

fn automatic_features(obs: &Observation) -> Vec<f64> {
    match obs {
        Observation::Scalar(x) => vec![*x],
        Observation::Vector(v) => v.clone(),
        Observation::Quantile(q) => moment_summary(q.values()).to_vec(),
    }
}

/// Classifier features for every record with an observed first element:
/// the attached covariates if any, otherwise summaries of the first
/// observation. Columns are standardized; constant columns are dropped.
pub fn response_features(ds: &PairedDataset) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = match ds.covariates() {
        Some(rows) => rows.to_vec(),
        None => ds
            .complete()
            .iter()
            .map(|(x1, _)| x1)
            .chain(ds.first_only())
            .map(automatic_features)
            .collect(),
    };
    standardize(raw)
}

fn standardize(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 {
        return rows;
    }
    let mut keep = Vec::new();
    for j in 0..p {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1.0) {
            keep.push((j, mean, sd));
        }
    }
    rows.iter()
        .map(|r| keep.iter().map(|&(j, m, s)| (r[j] - m) / s).collect())
        .collect()
}

/// Fits the response model and returns it with the resulting weights.
pub fn estimate_ipw(ds: &PairedDataset, options: &IpwOptions) -> Result<(LogisticModel, IpwWeights)> {
    let features = response_features(ds);
    let labels = observation_labels(ds);
    let model = fit_logistic(&features, &labels, options.ridge)?;
    let pi: Vec<f64> = features.iter().map(|x| model.predict(x)).collect();
    let weights = ipw_weights(ds, &pi, options.pi_floor, options.normalization)?;
    Ok((model, weights))
}
