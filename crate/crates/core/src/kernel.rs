//! Gaussian kernels over Euclidean and 2-Wasserstein geometry, the median
//! heuristic, and Gram matrices.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Observation, PairedDataset};
use crate::error::{Error, Result};
use crate::metric::mean_sq_diff;

/// Base metric the Gaussian kernel is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance on scalars and vectors.
    Euclidean,
    /// Squared 2-Wasserstein distance on quantile functions.
    Wasserstein2,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Wasserstein2 => "wasserstein2",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "wasserstein2" => Ok(Metric::Wasserstein2),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

/// Gaussian kernel `k(x, y) = exp(-d^2(x, y) / sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    bandwidth: f64,
    metric: Metric,
}

impl KernelSpec {
    /// `bandwidth` is sigma squared.
    pub fn gaussian(bandwidth: f64, metric: Metric) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        Ok(Self { bandwidth, metric })
    }

    /// Bandwidth from the median heuristic over every observed observation
    /// of the dataset, both timepoints and all blocks pooled.
    pub fn from_dataset(ds: &PairedDataset, metric: Metric) -> Result<Self> {
        Self::gaussian(median_heuristic(&ds.pooled(), metric)?, metric)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub(crate) fn from_sq_distance(&self, d2: f64) -> f64 {
        (-d2 / self.bandwidth).exp()
    }
}

/// Squared base-metric distance between two observations.
pub fn squared_distance(x: &Observation, y: &Observation, metric: Metric) -> Result<f64> {
    match (metric, x, y) {
        (Metric::Euclidean, Observation::Scalar(a), Observation::Scalar(b)) => Ok((a - b) * (a - b)),
        (Metric::Euclidean, Observation::Vector(a), Observation::Vector(b)) => {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    found: b.len(),
                });
            }
            Ok(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum())
        }
        (Metric::Wasserstein2, Observation::Quantile(a), Observation::Quantile(b)) => {
            if a.grid() != b.grid() {
                return Err(Error::GridMismatch);
            }
            Ok(mean_sq_diff(a.values(), b.values()))
        }
        (metric, x, y) => {
            let kind = if x.kind() != y.kind() {
                "mixed"
            } else {
                x.kind().name()
            };
            Err(Error::KindMismatch {
                metric: metric.name(),
                kind,
            })
        }
    }
}

pub fn kernel_eval(x: &Observation, y: &Observation, spec: &KernelSpec) -> Result<f64> {
    Ok(spec.from_sq_distance(squared_distance(x, y, spec.metric)?))
}

/// Median of the `n(n-1)/2` pairwise squared distances; the mean of the two
/// central values for an even count.
pub fn median_heuristic(points: &[&Observation], metric: Metric) -> Result<f64> {
    let d = DistanceMatrix::new(points, metric)?;
    d.median_heuristic()
}

/// Dense row-major matrix of kernel values `k(a_i, b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    /// Matrix with entries `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Gram matrix between two collections.
pub fn gram(a: &[&Observation], b: &[&Observation], spec: &KernelSpec) -> Result<GramMatrix> {
    let cols = b.len();
    let rows: Vec<Vec<f64>> = a
        .par_iter()
        .map(|x| b.iter().map(|y| kernel_eval(x, y, spec)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(GramMatrix {
        rows: a.len(),
        cols,
        data: rows.concat(),
    })
}

/// Gram matrix of a collection with itself; the lower triangle mirrors the
/// upper so the result is exactly symmetric.
pub fn gram_symmetric(a: &[&Observation], spec: &KernelSpec) -> Result<GramMatrix> {
    let d = DistanceMatrix::new(a, spec.metric)?;
    Ok(d.to_gram(spec))
}

/// Symmetric matrix of pairwise squared distances, shared between the
/// median heuristic and the Gram computation.
#[derive(Debug, Clone)]
pub(crate) struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub(crate) fn new(points: &[&Observation], metric: Metric) -> Result<Self> {
        let n = points.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                points[i + 1..]
                    .iter()
                    .map(|y| squared_distance(points[i], y, metric))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut data = vec![0.0; n * n];
        for (i, row) in upper.into_iter().enumerate() {
            for (off, d) in row.into_iter().enumerate() {
                let j = i + 1 + off;
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Ok(Self { n, data })
    }

    /// Sum of two distance matrices, entrywise.
    pub(crate) fn add(&self, other: &DistanceMatrix) -> DistanceMatrix {
        debug_assert_eq!(self.n, other.n);
        DistanceMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub(crate) fn median_heuristic(&self) -> Result<f64> {
        let n = self.n;
        if n < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: n });
        }
        let mut vals: Vec<f64> = (0..n)
            .flat_map(|i| self.data[i * n + i + 1..(i + 1) * n].iter().copied())
            .collect();
        let m = vals.len();
        let mid = m / 2;
        let (_, &mut upper, _) = vals.select_nth_unstable_by(mid, f64::total_cmp);
        let median = if m % 2 == 1 {
            upper
        } else {
            let lower = vals[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lower + upper)
        };
        if median > 0.0 {
            Ok(median)
        } else {
            Err(Error::DegenerateBandwidth)
        }
    }

    pub(crate) fn to_gram(&self, spec: &KernelSpec) -> GramMatrix {
        GramMatrix {
            rows: self.n,
            cols: self.n,
            data: self.data.iter().map(|&d| spec.from_sq_distance(d)).collect(),
        }
    }
}
