//! Density estimates, empirical quantile functions and the 2-Wasserstein
//! distance between gridded quantile functions.

use std::f64::consts::PI;

use crate::data::{ProbabilityGrid, QuantileFunction};
use crate::error::{Error, Result};

/// Gaussian kernel density estimate evaluated on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density over its grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(y, f)| 0.5 * (y[1] - y[0]) * (f[0] + f[1]))
            .sum()
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `f(y) = 1/(m h) * sum_j K((Y_j - y) / h)` with `K` the standard normal density.
pub fn kde_density(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "evaluation grid must be strictly increasing".into(),
        ));
    }
    let scale = 1.0 / (samples.len() as f64 * bandwidth);
    let density = grid
        .iter()
        .map(|&y| {
            scale
                * samples
                    .iter()
                    .map(|&s| std_normal_pdf((s - y) / bandwidth))
                    .sum::<f64>()
        })
        .collect();
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        density,
        bandwidth,
    })
}

/// Silverman's rule of thumb: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = linear_quantile(&sorted, 0.75) - linear_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::InvalidBandwidth(h))
    }
}

fn linear_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `points` equispaced values spanning the sample range padded by `4h`.
pub fn default_eval_grid(samples: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let points = points.max(2);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Left-continuous inverse of the empirical CDF: `Q(t)` is the `k`-th order
/// statistic with `k` the smallest index such that `k / n >= t`.
pub fn empirical_quantile(samples: &[f64], grid: &ProbabilityGrid) -> Result<QuantileFunction> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let nf = n as f64;
    let values = grid
        .points()
        .iter()
        .map(|&t| {
            // ceil(t n) can be off by one when t n is an integer in exact
            // arithmetic; settle it by comparing k / n against t directly.
            let mut k = ((t * nf).ceil() as usize).clamp(1, n);
            while k > 1 && (k - 1) as f64 / nf >= t {
                k -= 1;
            }
            while k < n && (k as f64 / nf) < t {
                k += 1;
            }
            sorted[k - 1]
        })
        .collect();
    QuantileFunction::new(grid.clone(), values)
}

/// Squared 2-Wasserstein distance: the mean of squared differences of the
/// two quantile functions over their shared grid.
pub fn wasserstein2_sq(f: &QuantileFunction, g: &QuantileFunction) -> Result<f64> {
    if f.grid() != g.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(mean_sq_diff(f.values(), g.values()))
}

pub(crate) fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}
