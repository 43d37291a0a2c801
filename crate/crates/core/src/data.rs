//! Matched-pairs data layout.
//!
//! A [`PairedDataset`] keeps the records sorted into three blocks: complete
//! pairs, records where only the first timepoint was observed, and records
//! where only the second was. Missingness is structural; the per-record
//! flags are derived from the block a record lives in.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Strictly increasing probabilities in the open interval (0, 1).
#[derive(Debug, Clone)]
pub struct ProbabilityGrid(Arc<[f64]>);

impl ProbabilityGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidQuantile(format!(
                "grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        for (i, &t) in points.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidQuantile(format!(
                    "grid point {t} outside (0, 1)"
                )));
            }
            if i > 0 && points[i - 1] >= t {
                return Err(Error::InvalidQuantile(
                    "grid must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self(points.into()))
    }

    /// Equispaced midpoints `(i - 0.5) / m`, `i = 1..=m`.
    pub fn midpoint(m: usize) -> Result<Self> {
        Self::new((1..=m).map(|i| (i as f64 - 0.5) / m as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ProbabilityGrid {
    fn default() -> Self {
        Self::midpoint(100).expect("100-point midpoint grid is valid")
    }
}

impl PartialEq for ProbabilityGrid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0[..] == other.0[..]
    }
}

/// A distribution represented by its quantile function sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFunction {
    grid: ProbabilityGrid,
    values: Vec<f64>,
}

impl QuantileFunction {
    /// Values must be finite and nondecreasing; ties are allowed.
    pub fn new(grid: ProbabilityGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidQuantile("non-finite value".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidQuantile(
                "values must be nondecreasing".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &ProbabilityGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    Scalar,
    Vector,
    Quantile,
}

impl ObservationKind {
    pub fn name(self) -> &'static str {
        match self {
            ObservationKind::Scalar => "scalar",
            ObservationKind::Vector => "vector",
            ObservationKind::Quantile => "quantile",
        }
    }
}

/// One measurement: a Euclidean point or a distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Scalar(f64),
    Vector(Vec<f64>),
    Quantile(QuantileFunction),
}

impl Observation {
    pub fn kind(&self) -> ObservationKind {
        match self {
            Observation::Scalar(_) => ObservationKind::Scalar,
            Observation::Vector(_) => ObservationKind::Vector,
            Observation::Quantile(_) => ObservationKind::Quantile,
        }
    }

    /// The raw coordinates: the scalar, the vector, or the quantile values.
    pub fn values(&self) -> &[f64] {
        match self {
            Observation::Scalar(x) => std::slice::from_ref(x),
            Observation::Vector(v) => v,
            Observation::Quantile(q) => q.values(),
        }
    }

    fn compatible_with(&self, other: &Observation) -> Result<()> {
        match (self, other) {
            (Observation::Scalar(_), Observation::Scalar(_)) => Ok(()),
            (Observation::Vector(a), Observation::Vector(b)) => {
                if a.len() == b.len() {
                    Ok(())
                } else {
                    Err(Error::DimensionMismatch {
                        expected: a.len(),
                        found: b.len(),
                    })
                }
            }
            (Observation::Quantile(a), Observation::Quantile(b)) => {
                if a.grid() == b.grid() {
                    Ok(())
                } else {
                    Err(Error::GridMismatch)
                }
            }
            (a, b) => Err(Error::HeterogeneousKinds(format!(
                "{} and {}",
                a.kind().name(),
                b.kind().name()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Timepoint {
    First,
    Second,
}

impl Timepoint {
    pub fn number(self) -> u8 {
        match self {
            Timepoint::First => 1,
            Timepoint::Second => 2,
        }
    }
}

impl TryFrom<&str> for Timepoint {
    type Error = Error;

    fn try_from(tag: &str) -> Result<Self> {
        match tag.trim() {
            "1" => Ok(Timepoint::First),
            "2" => Ok(Timepoint::Second),
            other => Err(Error::InvalidTimepoint(other.to_string())),
        }
    }
}

impl fmt::Display for Timepoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// A raw long-format record: subject id, timepoint, payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub timepoint: Timepoint,
    pub observation: Observation,
}

/// Matched pairs sorted into complete, first-only and second-only blocks.
///
/// Covariates, when present, are aligned with the records whose first
/// element is observed: the complete block followed by the first-only block.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    complete: Vec<(Observation, Observation)>,
    first_only: Vec<Observation>,
    second_only: Vec<Observation>,
    complete_ids: Vec<String>,
    first_only_ids: Vec<String>,
    second_only_ids: Vec<String>,
    covariates: Option<Vec<Vec<f64>>>,
}

impl PairedDataset {
    /// Builds a dataset from already sorted blocks, checking that every
    /// observation has the same kind and shape and that ids are unique.
    pub fn from_blocks(
        complete: Vec<(String, Observation, Observation)>,
        first_only: Vec<(String, Observation)>,
        second_only: Vec<(String, Observation)>,
    ) -> Result<Self> {
        let mut ds = PairedDataset {
            complete: Vec::with_capacity(complete.len()),
            first_only: Vec::with_capacity(first_only.len()),
            second_only: Vec::with_capacity(second_only.len()),
            complete_ids: Vec::with_capacity(complete.len()),
            first_only_ids: Vec::with_capacity(first_only.len()),
            second_only_ids: Vec::with_capacity(second_only.len()),
            covariates: None,
        };
        for (id, x1, x2) in complete {
            ds.complete_ids.push(id);
            ds.complete.push((x1, x2));
        }
        for (id, x1) in first_only {
            ds.first_only_ids.push(id);
            ds.first_only.push(x1);
        }
        for (id, x2) in second_only {
            ds.second_only_ids.push(id);
            ds.second_only.push(x2);
        }

        let mut seen = HashMap::new();
        for (id, tp) in ds.records_index() {
            if seen.insert(id.to_string(), ()).is_some() {
                return Err(Error::DuplicateRecord {
                    id: id.to_string(),
                    timepoint: tp,
                });
            }
        }
        {
            let mut obs = ds.observations();
            if let Some(first) = obs.next() {
                for o in obs {
                    first.compatible_with(o)?;
                }
            }
        }
        Ok(ds)
    }

    fn records_index(&self) -> impl Iterator<Item = (&str, u8)> {
        self.complete_ids
            .iter()
            .map(|id| (id.as_str(), 1))
            .chain(self.first_only_ids.iter().map(|id| (id.as_str(), 1)))
            .chain(self.second_only_ids.iter().map(|id| (id.as_str(), 2)))
    }

    fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.complete
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain(self.first_only.iter())
            .chain(self.second_only.iter())
    }

    /// Attaches one covariate row per record with an observed first
    /// element, in layout order (complete block, then first-only block).
    pub fn with_covariate_rows(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        let expected = self.n_first_observed();
        if rows.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: rows.len(),
            });
        }
        if let Some(first) = rows.first() {
            if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: bad.len(),
                });
            }
        }
        self.covariates = Some(rows);
        Ok(self)
    }

    /// Attaches covariates looked up by id. Every record with an observed
    /// first element needs a row; rows for unknown ids are rejected.
    pub fn with_covariate_table(self, table: &HashMap<String, Vec<f64>>) -> Result<Self> {
        let known: std::collections::HashSet<&str> =
            self.records_index().map(|(id, _)| id).collect();
        let mut unknown: Vec<&String> =
            table.keys().filter(|id| !known.contains(id.as_str())).collect();
        unknown.sort();
        if let Some(id) = unknown.first() {
            return Err(Error::UnknownId((*id).clone()));
        }
        let rows = self
            .first_observed_ids()
            .map(|id| {
                table
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingCovariates(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_covariate_rows(rows)
    }

    pub fn n1(&self) -> usize {
        self.complete.len()
    }

    pub fn n2(&self) -> usize {
        self.first_only.len()
    }

    pub fn n3(&self) -> usize {
        self.second_only.len()
    }

    pub fn n(&self) -> usize {
        self.n1() + self.n2() + self.n3()
    }

    /// Records whose first element is observed (complete + first-only).
    pub fn n_first_observed(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn complete(&self) -> &[(Observation, Observation)] {
        &self.complete
    }

    pub fn first_only(&self) -> &[Observation] {
        &self.first_only
    }

    pub fn second_only(&self) -> &[Observation] {
        &self.second_only
    }

    pub fn complete_ids(&self) -> &[String] {
        &self.complete_ids
    }

    pub fn first_only_ids(&self) -> &[String] {
        &self.first_only_ids
    }

    pub fn second_only_ids(&self) -> &[String] {
        &self.second_only_ids
    }

    /// Ids in layout order: complete, first-only, second-only.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records_index().map(|(id, _)| id)
    }

    pub fn first_observed_ids(&self) -> impl Iterator<Item = &str> {
        self.complete_ids
            .iter()
            .chain(self.first_only_ids.iter())
            .map(String::as_str)
    }

    pub fn covariates(&self) -> Option<&[Vec<f64>]> {
        self.covariates.as_deref()
    }

    pub fn kind(&self) -> Option<ObservationKind> {
        self.observations().next().map(Observation::kind)
    }

    /// First observations of the complete block.
    pub fn complete_first(&self) -> Vec<&Observation> {
        self.complete.iter().map(|(a, _)| a).collect()
    }

    pub fn complete_second(&self) -> Vec<&Observation> {
        self.complete.iter().map(|(_, b)| b).collect()
    }

    /// Every observed observation: complete firsts, complete seconds,
    /// first-only, second-only.
    pub fn pooled(&self) -> Vec<&Observation> {
        self.complete
            .iter()
            .map(|(a, _)| a)
            .chain(self.complete.iter().map(|(_, b)| b))
            .chain(self.first_only.iter())
            .chain(self.second_only.iter())
            .collect()
    }

    /// Per-record missingness flags `[first_missing, second_missing]` in
    /// layout order; `true` marks an absent element.
    pub fn missing_flags(&self) -> Vec<[bool; 2]> {
        std::iter::repeat_n([false, false], self.n1())
            .chain(std::iter::repeat_n([false, true], self.n2()))
            .chain(std::iter::repeat_n([true, false], self.n3()))
            .collect()
    }

    /// Flattens back into long-format records.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(2 * self.n1() + self.n2() + self.n3());
        for (id, (x1, x2)) in self.complete_ids.iter().zip(&self.complete) {
            out.push(Record {
                id: id.clone(),
                timepoint: Timepoint::First,
                observation: x1.clone(),
            });
            out.push(Record {
                id: id.clone(),
                timepoint: Timepoint::Second,
                observation: x2.clone(),
            });
        }
        for (id, x1) in self.first_only_ids.iter().zip(&self.first_only) {
            out.push(Record {
                id: id.clone(),
                timepoint: Timepoint::First,
                observation: x1.clone(),
            });
        }
        for (id, x2) in self.second_only_ids.iter().zip(&self.second_only) {
            out.push(Record {
                id: id.clone(),
                timepoint: Timepoint::Second,
                observation: x2.clone(),
            });
        }
        out
    }
}

/// Groups long-format records by id into the sorted block layout.
///
/// Within each block, subjects keep the order in which their id first
/// appeared in the input.
pub fn validate_dataset(records: Vec<Record>) -> Result<PairedDataset> {
    let mut order: Vec<String> = Vec::new();
    let mut slots: HashMap<String, [Option<Observation>; 2]> = HashMap::new();
    for rec in records {
        let slot = slots.entry(rec.id.clone()).or_insert_with(|| {
            order.push(rec.id.clone());
            [None, None]
        });
        let idx = match rec.timepoint {
            Timepoint::First => 0,
            Timepoint::Second => 1,
        };
        if slot[idx].is_some() {
            return Err(Error::DuplicateRecord {
                id: rec.id,
                timepoint: rec.timepoint.number(),
            });
        }
        slot[idx] = Some(rec.observation);
    }

    let mut complete = Vec::new();
    let mut first_only = Vec::new();
    let mut second_only = Vec::new();
    for id in order {
        let [a, b] = slots.remove(&id).expect("id recorded in order");
        match (a, b) {
            (Some(a), Some(b)) => complete.push((id, a, b)),
            (Some(a), None) => first_only.push((id, a)),
            (None, Some(b)) => second_only.push((id, b)),
            (None, None) => unreachable!("every id comes from a record"),
        }
    }
    PairedDataset::from_blocks(complete, first_only, second_only)
}

/// Outcome of a calibrated test: statistic, replicas, p-value and the
/// configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub replicas: Vec<f64>,
    /// Combination weight; `None` for the IPW test, which has no incomplete term.
    pub alpha: Option<f64>,
    pub bootstrap: usize,
    pub l_param: f64,
    pub bandwidth: f64,
    pub seed: u64,
    pub plus_one: bool,
}

/// `(1/B) #{T^b >= T}`, or `(1 + #) / (1 + B)` with `plus_one`.
pub fn p_value(statistic: f64, replicas: &[f64], plus_one: bool) -> f64 {
    let hits = replicas.iter().filter(|&&r| r >= statistic).count();
    if plus_one {
        (1 + hits) as f64 / (1 + replicas.len()) as f64
    } else {
        hits as f64 / replicas.len() as f64
    }
}
