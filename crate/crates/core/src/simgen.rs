//! Synthetic matched-pairs data on quantile functions and the rejection-rate
//! study built on it.
//!
//! Observations follow `Q(t) = V1 + V2 eta(Z) + V2 tau(Z) Q0(t)` with linear
//! location `eta`, linear scale `tau` and a linear base quantile `Q0`. Each
//! subject's `(V1, V2)` comes from uniforms coupled by a Gaussian copula and
//! is shared by both of its timepoints.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::Write;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::data::{Observation, PairedDataset, ProbabilityGrid, QuantileFunction};
use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, Metric};
use crate::missingness::sigmoid;
use crate::testing::{self, replica_rng, McarConfig, MarConfig};

/// Linear location-scale model on quantile functions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationScaleModel {
    /// `eta(z) = location[0] + location[1] z`.
    pub location: [f64; 2],
    /// `tau(z) = scale[0] + scale[1] z`.
    pub scale: [f64; 2],
    /// `Q0(t) = base[0] + base[1] t`.
    pub base: [f64; 2],
    pub grid: ProbabilityGrid,
}

impl Default for LocationScaleModel {
    fn default() -> Self {
        Self {
            location: [0.0, 0.3],
            scale: [0.0, 0.005],
            base: [70.0, 240.0],
            grid: ProbabilityGrid::default(),
        }
    }
}

impl LocationScaleModel {
    pub fn location_at(&self, z: f64) -> f64 {
        self.location[0] + self.location[1] * z
    }

    pub fn scale_at(&self, z: f64) -> f64 {
        self.scale[0] + self.scale[1] * z
    }

    /// Quantile function for one subject at one timepoint.
    pub fn sample_quantile_obs(&self, v1: f64, v2: f64, z: f64) -> Result<QuantileFunction> {
        let spread = v2 * self.scale_at(z);
        if !(spread > 0.0 && spread.is_finite()) || self.base[1] <= 0.0 {
            return Err(Error::DegenerateScale(spread));
        }
        let shift = v1 + v2 * self.location_at(z);
        let values = self
            .grid
            .points()
            .iter()
            .map(|&t| shift + spread * (self.base[0] + self.base[1] * t))
            .collect();
        QuantileFunction::new(self.grid.clone(), values)
    }
}

/// `(V1, V2) = (-20 + 40 u, 0.8 + 0.4 v)`, so `E V1 = 0` and `E V2 = 1`.
pub fn random_effects(u: f64, v: f64) -> (f64, f64) {
    (-20.0 + 40.0 * u, 0.8 + 0.4 * v)
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Latent normal correlation whose copula gives uniforms with Pearson
/// correlation `rho`.
pub fn latent_correlation(rho: f64) -> f64 {
    2.0 * (PI * rho / 6.0).sin()
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("rho must lie in [0, 1), got {rho}")))
    }
}

fn draw_uniform_pair<R: Rng + ?Sized>(r: f64, rng: &mut R) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let e: f64 = rng.sample(StandardNormal);
    let b = r * a + (1.0 - r * r).sqrt() * e;
    (normal_cdf(a), normal_cdf(b))
}

/// `n` pairs of uniforms with Pearson correlation `rho`.
pub fn correlated_uniforms<R: Rng + ?Sized>(rho: f64, n: usize, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    check_rho(rho)?;
    let r = latent_correlation(rho);
    Ok((0..n).map(|_| draw_uniform_pair(r, rng)).collect())
}

/// Missingness design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Fixed block sizes.
    Mcar { n1: usize, n2: usize, n3: usize },
    /// `n` subjects whose second element goes missing through the
    /// logistic noise mechanism; no second-only block.
    Mar { n: usize },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Mcar { .. } => "mcar",
            Scenario::Mar { .. } => "mar",
        }
    }
}

/// How second elements go missing in the MAR design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingMechanism {
    /// Missing with probability `1 / (1 + exp(-1 + Y1 + Y2))`.
    Logistic,
    /// Nothing goes missing.
    Never,
}

/// One simulation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub rho: f64,
    /// Age range at the first timepoint.
    pub z1: (f64, f64),
    /// Age range at the second timepoint.
    pub z2: (f64, f64),
    pub reps: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub model: LocationScaleModel,
    pub mechanism: MissingMechanism,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, rho: f64, z1: (f64, f64), z2: (f64, f64)) -> Self {
        Self {
            scenario,
            rho,
            z1,
            z2,
            reps: 2000,
            bootstrap: 2000,
            seed: 0,
            model: LocationScaleModel::default(),
            mechanism: MissingMechanism::Logistic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        let positive = match self.scenario {
            Scenario::Mcar { n1, n2, n3 } => n1 + n2 + n3 > 0,
            Scenario::Mar { n } => n > 0,
        };
        if !positive {
            return Err(Error::InvalidParameter("sample sizes must be positive".into()));
        }
        for (lo, hi) in [self.z1, self.z2] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!("invalid age range {lo},{hi}")));
            }
        }
        if self.reps == 0 || self.bootstrap == 0 {
            return Err(Error::InvalidParameter("reps and bootstrap must be >= 1".into()));
        }
        Ok(())
    }
}

fn uniform_in<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

struct Subject {
    first: Observation,
    second: Observation,
}

fn draw_subject<R: Rng + ?Sized>(config: &ScenarioConfig, r: f64, rng: &mut R) -> Result<Subject> {
    let (u, v) = draw_uniform_pair(r, rng);
    let (v1, v2) = random_effects(u, v);
    let z1 = uniform_in(config.z1, rng);
    let z2 = uniform_in(config.z2, rng);
    Ok(Subject {
        first: Observation::Quantile(config.model.sample_quantile_obs(v1, v2, z1)?),
        second: Observation::Quantile(config.model.sample_quantile_obs(v1, v2, z2)?),
    })
}

/// MCAR dataset with the configured block sizes. Incomplete records come
/// from their own independent subjects.
pub fn generate_mcar<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<PairedDataset> {
    config.validate()?;
    let Scenario::Mcar { n1, n2, n3 } = config.scenario else {
        return Err(Error::InvalidParameter("generate_mcar needs an MCAR scenario".into()));
    };
    let r = latent_correlation(config.rho);
    let mut complete = Vec::with_capacity(n1);
    for j in 0..n1 {
        let s = draw_subject(config, r, rng)?;
        complete.push((format!("s{}", j + 1), s.first, s.second));
    }
    let mut first_only = Vec::with_capacity(n2);
    for j in 0..n2 {
        let s = draw_subject(config, r, rng)?;
        first_only.push((format!("s{}", n1 + j + 1), s.first));
    }
    let mut second_only = Vec::with_capacity(n3);
    for j in 0..n3 {
        let s = draw_subject(config, r, rng)?;
        second_only.push((format!("s{}", n1 + n2 + j + 1), s.second));
    }
    PairedDataset::from_blocks(complete, first_only, second_only)
}

/// Probability that the second element is observed given the noise.
pub fn observation_probability(y1: f64, y2: f64) -> f64 {
    sigmoid(-1.0 + y1 + y2)
}

const MAR_ATTEMPTS: usize = 10;

/// MAR dataset of `n` subjects. The noise `(Y1, Y2)` driving missingness is
/// attached as covariates of every record with an observed first element.
pub fn generate_mar<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<PairedDataset> {
    config.validate()?;
    let Scenario::Mar { n } = config.scenario else {
        return Err(Error::InvalidParameter("generate_mar needs a MAR scenario".into()));
    };
    let r = latent_correlation(config.rho);
    for _ in 0..MAR_ATTEMPTS {
        let mut complete = Vec::new();
        let mut first_only = Vec::new();
        let mut cov_complete = Vec::new();
        let mut cov_first = Vec::new();
        for j in 0..n {
            let s = draw_subject(config, r, rng)?;
            let y1: f64 = rng.sample(StandardNormal);
            let y2: f64 = rng.sample(StandardNormal);
            let observed = match config.mechanism {
                MissingMechanism::Logistic => rng.random::<f64>() < observation_probability(y1, y2),
                MissingMechanism::Never => true,
            };
            let id = format!("s{}", j + 1);
            if observed {
                complete.push((id, s.first, s.second));
                cov_complete.push(vec![y1, y2]);
            } else {
                first_only.push((id, s.first));
                cov_first.push(vec![y1, y2]);
            }
        }
        if complete.is_empty() {
            continue;
        }
        cov_complete.extend(cov_first);
        return PairedDataset::from_blocks(complete, first_only, Vec::new())?.with_covariate_rows(cov_complete);
    }
    Err(Error::InvalidParameter(format!(
        "no complete pairs after {MAR_ATTEMPTS} attempts"
    )))
}

/// Generates one dataset for a scenario.
pub fn generate<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<PairedDataset> {
    match config.scenario {
        Scenario::Mcar { .. } => generate_mcar(config, rng),
        Scenario::Mar { .. } => generate_mar(config, rng),
    }
}

/// Dataset of replication `rep` and the seed its test uses.
pub fn replication_dataset(config: &ScenarioConfig, rep: usize) -> Result<(PairedDataset, u64)> {
    let mut rng = replica_rng(config.seed, rep as u64);
    let test_seed = rng.next_u64();
    Ok((generate(config, &mut rng)?, test_seed))
}

/// One replication: realized block sizes and the test's p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replication {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Runs replication `rep` of a setting: generate, test with the median
/// heuristic bandwidth in the Wasserstein metric and default parameters.
pub fn replicate(config: &ScenarioConfig, rep: usize) -> Result<Replication> {
    let (ds, test_seed) = replication_dataset(config, rep)?;
    let spec = KernelSpec::from_dataset(&ds, Metric::Wasserstein2)?;
    let result = match config.scenario {
        Scenario::Mcar { .. } => {
            let mut tc = McarConfig::defaults_for(&ds, test_seed);
            tc.bootstrap = config.bootstrap;
            testing::mcar_test(&ds, &spec, &tc)?
        }
        Scenario::Mar { .. } => {
            let mut tc = MarConfig::new(test_seed);
            tc.bootstrap = config.bootstrap;
            testing::mar_test(&ds, &spec, &tc)?.result
        }
    };
    Ok(Replication {
        n1: ds.n1(),
        n2: ds.n2(),
        n3: ds.n3(),
        statistic: result.statistic,
        p_value: result.p_value,
    })
}

/// Rejection rate of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub config: ScenarioConfig,
    pub level: f64,
    pub rejections: usize,
    pub rate: f64,
    pub mean_counts: [f64; 3],
}

/// Runs every setting; replications run in parallel and are aggregated in
/// order, so the table does not depend on the thread count.
pub fn run_study(configs: &[ScenarioConfig], level: f64) -> Result<Vec<StudyRow>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {level}")));
    }
    configs
        .iter()
        .map(|config| {
            config.validate()?;
            let reps: Vec<Replication> = (0..config.reps)
                .into_par_iter()
                .map(|r| replicate(config, r))
                .collect::<Result<_>>()?;
            let rejections = reps.iter().filter(|r| r.p_value <= level).count();
            let k = reps.len() as f64;
            let mean = |f: fn(&Replication) -> usize| reps.iter().map(|r| f(r) as f64).sum::<f64>() / k;
            Ok(StudyRow {
                config: config.clone(),
                level,
                rejections,
                rate: rejections as f64 / k,
                mean_counts: [mean(|r| r.n1), mean(|r| r.n2), mean(|r| r.n3)],
            })
        })
        .collect()
}

/// The published grid of settings: every correlation in {0, .2, .4, .6, .8},
/// null and shifted ages, for both designs, at full size.
pub fn full_scale_configs(seed: u64) -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for scenario in [Scenario::Mcar { n1: 150, n2: 150, n3: 150 }, Scenario::Mar { n: 300 }] {
        for z2 in [(30.0, 50.0), (50.0, 70.0)] {
            for rho in [0.0, 0.2, 0.4, 0.6, 0.8] {
                let mut c = ScenarioConfig::new(scenario, rho, (30.0, 50.0), z2);
                c.seed = seed;
                out.push(c);
            }
        }
    }
    out
}

/// Writes the study table as CSV.
pub fn write_study_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::InvalidParameter(format!("writing study table: {e}"));
    w.write_record([
        "scenario", "rho", "z1_lo", "z1_hi", "z2_lo", "z2_hi", "reps", "bootstrap", "level", "rejections",
        "rejection_rate", "mean_n1", "mean_n2", "mean_n3",
    ])
    .map_err(io)?;
    for r in rows {
        let c = &r.config;
        w.write_record([
            c.scenario.name().to_string(),
            format!("{:?}", c.rho),
            format!("{:?}", c.z1.0),
            format!("{:?}", c.z1.1),
            format!("{:?}", c.z2.0),
            format!("{:?}", c.z2.1),
            c.reps.to_string(),
            c.bootstrap.to_string(),
            format!("{:?}", r.level),
            r.rejections.to_string(),
            format!("{:?}", r.rate),
            format!("{:?}", r.mean_counts[0]),
            format!("{:?}", r.mean_counts[1]),
            format!("{:?}", r.mean_counts[2]),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidParameter(format!("writing study table: {e}")))?;
    Ok(())
}
