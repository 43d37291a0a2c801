//! Kernel two-sample tests for matched pairs with missing observations.
//!
//! Observations may be scalars, vectors, or quantile functions (compared in
//! the 2-Wasserstein metric). The crate provides MMD statistics, wild
//! bootstrap and permutation calibration for MCAR data, inverse-probability
//! weighted tests for MAR data, weighted kernel clustering and a simulation
//! harness.

pub mod cluster;
pub mod data;
pub mod error;
pub mod io;
pub mod kernel;
pub mod metric;
pub mod missingness;
pub mod mmd;
pub mod simgen;
pub mod testing;

pub use data::{
    validate_dataset, Observation, ObservationKind, PairedDataset, ProbabilityGrid, QuantileFunction, Record,
    TestResult, Timepoint,
};
pub use error::{Error, Result};
pub use kernel::{KernelSpec, Metric};
