//! Weighted kernel clustering of complete pairs.
//!
//! The objective is `sum_i S_i / v_i` where `S_i` is the weighted kernel
//! mass inside cluster `i` and `v_i` its total weight. Local search moves
//! one pair at a time to the cluster with the largest gain.

use rand::Rng;
use rayon::prelude::*;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::kernel::{squared_distance, DistanceMatrix, GramMatrix, KernelSpec, Metric};
use crate::testing::replica_rng;

/// Default number of independent restarts.
pub const DEFAULT_RESTARTS: usize = 5;

/// Kernel between two pairs: `exp(-(d2(x1, y1) + d2(x2, y2)) / bandwidth)`.
pub fn pair_kernel(
    p: &(Observation, Observation),
    q: &(Observation, Observation),
    bandwidth: f64,
    metric: Metric,
) -> Result<f64> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    let d = squared_distance(&p.0, &q.0, metric)? + squared_distance(&p.1, &q.1, metric)?;
    Ok((-d / bandwidth).exp())
}

fn pair_distances(pairs: &[&(Observation, Observation)], metric: Metric) -> Result<DistanceMatrix> {
    let first: Vec<&Observation> = pairs.iter().map(|p| &p.0).collect();
    let second: Vec<&Observation> = pairs.iter().map(|p| &p.1).collect();
    Ok(DistanceMatrix::new(&first, metric)?.add(&DistanceMatrix::new(&second, metric)?))
}

/// Median of the summed squared distances over all pairs of pairs.
pub fn pair_bandwidth(pairs: &[&(Observation, Observation)], metric: Metric) -> Result<f64> {
    pair_distances(pairs, metric)?.median_heuristic()
}

/// Gram matrix of [`pair_kernel`] over a set of pairs.
pub fn pair_gram(pairs: &[&(Observation, Observation)], bandwidth: f64, metric: Metric) -> Result<GramMatrix> {
    let spec = KernelSpec::gaussian(bandwidth, metric)?;
    Ok(pair_distances(pairs, metric)?.to_gram(&spec))
}

/// Assignment of points to `k` clusters with cached per-cluster sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    assignment: Vec<usize>,
    k: usize,
    within: Vec<f64>,
    mass: Vec<f64>,
    counts: Vec<usize>,
}

fn term(s: f64, v: f64) -> f64 {
    if v > 0.0 {
        s / v
    } else {
        0.0
    }
}

impl ClusterState {
    /// Builds the state and its caches from scratch.
    pub fn new(assignment: Vec<usize>, k: usize, gram: &GramMatrix, weights: &[f64]) -> Result<Self> {
        let n = assignment.len();
        if gram.rows() != n || gram.cols() != n || weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: weights.len().max(gram.rows()),
            });
        }
        if let Some(&c) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidParameter(format!("cluster index {c} outside 0..{k}")));
        }
        let mut within = vec![0.0; k];
        let mut mass = vec![0.0; k];
        let mut counts = vec![0; k];
        for j in 0..n {
            let c = assignment[j];
            mass[c] += weights[j];
            counts[c] += 1;
            let row = gram.row(j);
            for h in 0..n {
                if assignment[h] == c {
                    within[c] += weights[j] * weights[h] * row[h];
                }
            }
        }
        Ok(Self {
            assignment,
            k,
            within,
            mass,
            counts,
        })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Cached internal similarity `S_i`.
    pub fn within(&self) -> &[f64] {
        &self.within
    }

    /// Cached weight mass `v_i`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Objective from the cached sums.
    pub fn cached_objective(&self) -> f64 {
        self.within.iter().zip(&self.mass).map(|(&s, &v)| term(s, v)).sum()
    }

    /// `S_c(X_j) = sum_{h in C_c} w_j w_h k(j, h)` for every cluster `c`.
    fn affinities(&self, j: usize, gram: &GramMatrix, weights: &[f64]) -> Vec<f64> {
        let mut aff = vec![0.0; self.k];
        let row = gram.row(j);
        for (h, &c) in self.assignment.iter().enumerate() {
            aff[c] += weights[j] * weights[h] * row[h];
        }
        aff
    }

    fn delta_with(&self, j: usize, to: usize, aff: &[f64], self_term: f64, w: f64) -> f64 {
        let from = self.assignment[j];
        let (s_i, v_i) = (self.within[from], self.mass[from]);
        let (s_l, v_l) = (self.within[to], self.mass[to]);
        let gained = term(s_l + 2.0 * aff[to] + self_term, v_l + w);
        let left = if self.counts[from] == 1 {
            0.0
        } else {
            term(s_i - 2.0 * aff[from] + self_term, v_i - w)
        };
        gained + left - term(s_l, v_l) - term(s_i, v_i)
    }

    fn apply(&mut self, j: usize, to: usize, aff: &[f64], self_term: f64, w: f64) {
        let from = self.assignment[j];
        if self.counts[from] == 1 {
            self.within[from] = 0.0;
            self.mass[from] = 0.0;
        } else {
            self.within[from] += self_term - 2.0 * aff[from];
            self.mass[from] -= w;
        }
        self.counts[from] -= 1;
        self.within[to] += 2.0 * aff[to] + self_term;
        self.mass[to] += w;
        self.counts[to] += 1;
        self.assignment[j] = to;
    }

    /// Moves point `j` to cluster `to`, updating the caches incrementally.
    pub fn move_point(&mut self, j: usize, to: usize, gram: &GramMatrix, weights: &[f64]) -> Result<()> {
        let from = self.assignment[j];
        if from == to {
            return Err(Error::SameCluster(to));
        }
        let aff = self.affinities(j, gram, weights);
        let w = weights[j];
        self.apply(j, to, &aff, w * w * gram.get(j, j), w);
        Ok(())
    }
}

/// `sum_i (1 / v_i) sum_{j, h in C_i} w_j w_h k(j, h)`, computed directly.
pub fn objective(state: &ClusterState, gram: &GramMatrix, weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..state.k {
        let members: Vec<usize> = (0..state.assignment.len())
            .filter(|&j| state.assignment[j] == c)
            .collect();
        if members.is_empty() {
            continue;
        }
        let v: f64 = members.iter().map(|&j| weights[j]).sum();
        if v <= 0.0 {
            return Err(Error::EmptyCluster(c));
        }
        let mut s = 0.0;
        for &j in &members {
            for &h in &members {
                s += weights[j] * weights[h] * gram.get(j, h);
            }
        }
        total += s / v;
    }
    Ok(total)
}

/// Change in the objective from moving point `j` to cluster `to`.
pub fn delta_move(j: usize, to: usize, state: &ClusterState, gram: &GramMatrix, weights: &[f64]) -> Result<f64> {
    let from = state.assignment[j];
    if from == to {
        return Err(Error::SameCluster(to));
    }
    if to >= state.k {
        return Err(Error::InvalidParameter(format!("cluster index {to} outside 0..{}", state.k)));
    }
    let aff = state.affinities(j, gram, weights);
    let w = weights[j];
    Ok(state.delta_with(j, to, &aff, w * w * gram.get(j, j), w))
}

/// Best target for point `j` and its gain; ties go to the lowest index.
pub fn best_move(j: usize, state: &ClusterState, gram: &GramMatrix, weights: &[f64]) -> Option<(usize, f64)> {
    let aff = state.affinities(j, gram, weights);
    let w = weights[j];
    let self_term = w * w * gram.get(j, j);
    let from = state.assignment[j];
    let mut best: Option<(usize, f64)> = None;
    for l in (0..state.k).filter(|&l| l != from) {
        let d = state.delta_with(j, l, &aff, self_term, w);
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((l, d));
        }
    }
    best
}

/// Outcome of a clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster per input pair; `None` for zero-weight pairs.
    pub assignment: Vec<Option<usize>>,
    /// Final state over the positive-weight pairs.
    pub state: ClusterState,
    /// Indices of the positive-weight pairs, in input order.
    pub active: Vec<usize>,
    pub objective: f64,
    /// Objective after initialization and after every accepted move.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub restart: usize,
}

/// Smallest gain treated as an improvement. Guards against cycling on
/// rounding noise when two assignments have equal objective.
fn gain_threshold(objective: f64) -> f64 {
    1e-12 * objective.abs().max(1.0)
}

fn initial_assignment<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut counts = vec![0usize; k];
    for &c in &a {
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            let donors: Vec<usize> = (0..n).filter(|&j| counts[a[j]] > 1).collect();
            let j = donors[rng.random_range(0..donors.len())];
            counts[a[j]] -= 1;
            a[j] = c;
            counts[c] += 1;
        }
    }
    a
}

/// A move accepted by local search: point, source, target, predicted gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub point: usize,
    pub from: usize,
    pub to: usize,
    pub gain: f64,
}

/// Local search from a given starting state; returns the final state, the
/// objective trace, the sweep count and whether a sweep made no move.
pub fn local_search(
    state: ClusterState,
    gram: &GramMatrix,
    weights: &[f64],
    max_sweeps: usize,
) -> (ClusterState, Vec<f64>, usize, bool) {
    local_search_observed(state, gram, weights, max_sweeps, |_, _, _| {})
}

/// [`local_search`] calling `observe(move, before, after)` around every
/// accepted move with the states before and after it.
pub fn local_search_observed(
    mut state: ClusterState,
    gram: &GramMatrix,
    weights: &[f64],
    max_sweeps: usize,
    mut observe: impl FnMut(Move, &ClusterState, &ClusterState),
) -> (ClusterState, Vec<f64>, usize, bool) {
    let mut trace = vec![state.cached_objective()];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut moved = false;
        for j in 0..state.assignment.len() {
            let aff = state.affinities(j, gram, weights);
            let w = weights[j];
            let self_term = w * w * gram.get(j, j);
            let from = state.assignment[j];
            let mut best: Option<(usize, f64)> = None;
            for l in (0..state.k).filter(|&l| l != from) {
                let d = state.delta_with(j, l, &aff, self_term, w);
                if best.is_none_or(|(_, b)| d > b) {
                    best = Some((l, d));
                }
            }
            if let Some((l, d)) = best {
                if d > gain_threshold(*trace.last().unwrap()) {
                    let before = state.clone();
                    state.apply(j, l, &aff, self_term, w);
                    let mv = Move {
                        point: j,
                        from,
                        to: l,
                        gain: d,
                    };
                    observe(mv, &before, &state);
                    trace.push(state.cached_objective());
                    moved = true;
                }
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }
    (state, trace, sweeps, converged)
}

/// Clusters pairs into `k` groups by weighted kernel local search.
///
/// Pairs with zero weight take no part and are left unassigned. Each restart
/// starts from its own seeded random assignment; the best objective wins,
/// ties going to the earliest restart.
pub fn cluster(
    gram: &GramMatrix,
    weights: &[f64],
    k: usize,
    max_sweeps: usize,
    seed: u64,
    restarts: usize,
) -> Result<Clustering> {
    let n = weights.len();
    if gram.rows() != n || gram.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: gram.rows(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidWeights(format!("weight {w} is not a finite nonnegative number")));
    }
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("k and restarts must be at least 1".into()));
    }
    let active: Vec<usize> = (0..n).filter(|&j| weights[j] > 0.0).collect();
    if k > active.len() {
        return Err(Error::TooManyClusters {
            k,
            available: active.len(),
        });
    }
    let m = active.len();
    let sub_gram = GramMatrix::from_fn(m, m, |a, b| gram.get(active[a], active[b]));
    let sub_w: Vec<f64> = active.iter().map(|&j| weights[j]).collect();

    let runs: Vec<(ClusterState, Vec<f64>, usize, bool)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r as u64);
            let init = initial_assignment(m, k, &mut rng);
            let state = ClusterState::new(init, k, &sub_gram, &sub_w)?;
            Ok(local_search(state, &sub_gram, &sub_w, max_sweeps))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.0.cached_objective() > runs[best].0.cached_objective() {
            best = r;
        }
    }
    let (state, trace, sweeps, converged) = runs.into_iter().nth(best).expect("at least one restart");
    let mut assignment = vec![None; n];
    for (pos, &j) in active.iter().enumerate() {
        assignment[j] = Some(state.assignment[pos]);
    }
    Ok(Clustering {
        assignment,
        objective: state.cached_objective(),
        state,
        active,
        trace,
        sweeps,
        converged,
        restart: best,
    })
}

/// Pointwise mean of the first and second observations in each cluster.
/// Empty clusters yield empty curves.
pub fn cluster_means(
    pairs: &[(Observation, Observation)],
    assignment: &[Option<usize>],
    k: usize,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let dim = pairs.first().map_or(0, |p| p.0.values().len());
    let mut sums = vec![(vec![0.0; dim], vec![0.0; dim]); k];
    let mut counts = vec![0usize; k];
    for (p, a) in pairs.iter().zip(assignment) {
        if let Some(c) = *a {
            counts[c] += 1;
            for (s, v) in sums[c].0.iter_mut().zip(p.0.values()) {
                *s += v;
            }
            for (s, v) in sums[c].1.iter_mut().zip(p.1.values()) {
                *s += v;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|((a, b), c)| {
            if c == 0 {
                (Vec::new(), Vec::new())
            } else {
                let f = c as f64;
                (a.into_iter().map(|x| x / f).collect(), b.into_iter().map(|x| x / f).collect())
            }
        })
        .collect()
}
