use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pairmmd::cluster::{self, DEFAULT_RESTARTS};
use pairmmd::io::{self, fmt_f64, PayloadFormat};
use pairmmd::metric::{default_eval_grid, kde_density, silverman_bandwidth};
use pairmmd::missingness::{IpwOptions, WeightNormalization};
use pairmmd::simgen::{self, Scenario, ScenarioConfig};
use pairmmd::testing::{self, McarConfig, MarConfig};
use pairmmd::{Error, KernelSpec, Metric, Observation, ObservationKind, PairedDataset, Result, TestResult};

#[derive(Parser)]
#[command(name = "pairmmd", version, about = "Kernel two-sample tests for matched pairs with missing data")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MCAR test combining complete pairs and incomplete records.
    TestMcar(McarArgs),
    /// IPW-weighted test on complete pairs under MAR.
    TestMar(MarArgs),
    /// Weighted kernel clustering of complete pairs.
    Cluster(ClusterArgs),
    /// Rejection-rate study on synthetic quantile data.
    Simulate(SimulateArgs),
    /// Gaussian kernel density estimate of a sample.
    Kde(KdeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Scalar,
    Vector,
    Quantile,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    /// Wasserstein for quantile data, Euclidean otherwise.
    Auto,
    Euclidean,
    Wasserstein2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Mcar,
    Mar,
}

#[derive(Args)]
struct InputArgs {
    /// Long-format dataset CSV.
    #[arg(long)]
    input: PathBuf,
    /// Covariates CSV `id,<feature...>`.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
}

#[derive(Args)]
struct KernelArgs {
    /// Kernel bandwidth sigma^2; overrides the median heuristic.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    metric: MetricArg,
}

#[derive(Args)]
struct OutputArgs {
    /// Report path (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Replicas CSV (default: `<report>.replicas.csv` when a report path is given).
    #[arg(long)]
    replicas: Option<PathBuf>,
}

#[derive(Args)]
struct IpwArgs {
    /// Floor on estimated observation probabilities.
    #[arg(long, default_value_t = 0.01)]
    pi_floor: f64,
    /// Ridge penalty of the logistic response model.
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Rescale weights to sum to one.
    #[arg(long)]
    self_normalize: bool,
}

#[derive(Args)]
struct McarArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Weight of the complete-pair statistic (default n1 / n).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    /// Wild-bootstrap dependence parameter (default sqrt(n1)).
    #[arg(long)]
    l_param: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use (1 + #{T^b >= T}) / (1 + B).
    #[arg(long)]
    plus_one: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct MarArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    ipw: IpwArgs,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    /// AR(1) dependence of the multipliers (default 0: independent).
    #[arg(long)]
    l_param: Option<f64>,
    /// Use the raw multipliers instead of subtracting their mean.
    #[arg(long)]
    uncentered: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    plus_one: bool,
    /// Per-record weights CSV `id,weight`.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    ipw: IpwArgs,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    max_sweeps: usize,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Equal weights instead of IPW weights.
    #[arg(long)]
    unweighted: bool,
    /// Assignment CSV `id,cluster` (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cluster mean curves CSV.
    #[arg(long)]
    means_out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "mcar")]
    scenario: ScenarioArg,
    /// Comma-separated correlations.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    rho: Vec<f64>,
    #[arg(long, default_value_t = 150)]
    n1: usize,
    #[arg(long, default_value_t = 150)]
    n2: usize,
    #[arg(long, default_value_t = 150)]
    n3: usize,
    /// Subjects in the MAR design.
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Age range at the first timepoint, `lo,hi`.
    #[arg(long, default_value = "30,50")]
    z1: String,
    /// Age range at the second timepoint, `lo,hi`.
    #[arg(long, default_value = "30,50")]
    z2: String,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    #[arg(long, default_value_t = 2000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rejection level.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Every published setting at full size (ignores the design flags).
    #[arg(long)]
    full_scale: bool,
    /// Study table CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the first replication's dataset.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    /// Writes the first replication's covariates (MAR only).
    #[arg(long)]
    covariates_out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct KdeArgs {
    /// Sample CSV; the first column is read.
    #[arg(long)]
    input: PathBuf,
    /// Bandwidth (default: Silverman's rule).
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Density CSV `y,density` (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Flat `key=value` report.
#[derive(Default)]
struct Report(Vec<(String, String)>);

impl Report {
    fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.push("command", command);
        r.push("version", env!("CARGO_PKG_VERSION"));
        r
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    fn float(&mut self, key: &str, value: f64) {
        self.push(key, fmt_f64(value));
    }

    fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn emit(&self, path: Option<&Path>) -> Result<()> {
        write_text(path, &self.render())
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
        }
    }
}

fn csv_text(rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 csv")
}

fn load(input: &InputArgs) -> Result<PairedDataset> {
    let format = match input.format {
        FormatArg::Auto => PayloadFormat::Auto,
        FormatArg::Scalar => PayloadFormat::Scalar,
        FormatArg::Vector => PayloadFormat::Vector,
        FormatArg::Quantile => PayloadFormat::Quantile,
    };
    let ds = io::read_dataset(&input.input, format)?;
    match &input.covariates {
        Some(p) => ds.with_covariate_table(&io::read_covariates(p)?),
        None => Ok(ds),
    }
}

fn echo_input(report: &mut Report, input: &InputArgs, ds: &PairedDataset) {
    report.push("input", input.input.display());
    report.push(
        "covariates",
        input.covariates.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
    );
    report.push("kind", ds.kind().map_or("empty", ObservationKind::name));
    report.push("n1", ds.n1());
    report.push("n2", ds.n2());
    report.push("n3", ds.n3());
}

fn resolve_metric(arg: MetricArg, ds: &PairedDataset) -> Metric {
    match arg {
        MetricArg::Euclidean => Metric::Euclidean,
        MetricArg::Wasserstein2 => Metric::Wasserstein2,
        MetricArg::Auto if ds.kind() == Some(ObservationKind::Quantile) => Metric::Wasserstein2,
        MetricArg::Auto => Metric::Euclidean,
    }
}

/// Bandwidth from the flag, else the heuristic; a degenerate heuristic
/// (all observations identical) falls back to 1 with a warning.
fn resolve_bandwidth(user: Option<f64>, heuristic: impl FnOnce() -> Result<f64>) -> Result<(f64, &'static str)> {
    if let Some(b) = user {
        return Ok((b, "user"));
    }
    match heuristic() {
        Ok(b) => Ok((b, "median-heuristic")),
        Err(Error::DegenerateBandwidth) => {
            eprintln!("warning: median pairwise distance is zero; using bandwidth 1");
            Ok((1.0, "fallback-degenerate"))
        }
        Err(e) => Err(e),
    }
}

fn echo_kernel(report: &mut Report, spec: &KernelSpec, source: &str) {
    report.push("metric", spec.metric());
    report.float("bandwidth", spec.bandwidth());
    report.push("bandwidth_source", source);
}

fn echo_result(report: &mut Report, result: &TestResult) {
    report.push("bootstrap", result.bootstrap);
    report.float("l_param", result.l_param);
    report.push("seed", result.seed);
    report.push("plus_one", result.plus_one);
    report.float("statistic", result.statistic);
    report.float("p_value", result.p_value);
}

fn write_replicas(output: &OutputArgs, result: &TestResult) -> Result<()> {
    let path = output
        .replicas
        .clone()
        .or_else(|| output.report.as_ref().map(|r| PathBuf::from(format!("{}.replicas.csv", r.display()))));
    if let Some(p) = path {
        let rows = std::iter::once(vec!["replica".to_string(), "statistic".to_string()]).chain(
            result
                .replicas
                .iter()
                .enumerate()
                .map(|(b, v)| vec![b.to_string(), fmt_f64(*v)]),
        );
        io::write_table(&p, rows)?;
    }
    Ok(())
}

fn ipw_options(args: &IpwArgs) -> IpwOptions {
    IpwOptions {
        pi_floor: args.pi_floor,
        ridge: args.ridge,
        normalization: if args.self_normalize {
            WeightNormalization::SelfNormalized
        } else {
            WeightNormalization::Raw
        },
    }
}

fn echo_ipw(report: &mut Report, opts: &IpwOptions) {
    report.float("pi_floor", opts.pi_floor);
    report.float("ridge", opts.ridge);
    report.push(
        "normalization",
        match opts.normalization {
            WeightNormalization::Raw => "raw",
            WeightNormalization::SelfNormalized => "self-normalized",
        },
    );
}

fn run_mcar(args: &McarArgs) -> Result<()> {
    let ds = load(&args.input)?;
    let metric = resolve_metric(args.kernel.metric, &ds);
    let (bw, source) = resolve_bandwidth(args.kernel.bandwidth, || {
        KernelSpec::from_dataset(&ds, metric).map(|s| s.bandwidth())
    })?;
    let spec = KernelSpec::gaussian(bw, metric)?;
    let mut config = McarConfig::defaults_for(&ds, args.seed);
    config.bootstrap = args.bootstrap;
    config.plus_one = args.plus_one;
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(l) = args.l_param {
        config.l_param = l;
    }
    let result = testing::mcar_test(&ds, &spec, &config)?;

    let mut report = Report::new("test-mcar");
    echo_input(&mut report, &args.input, &ds);
    echo_kernel(&mut report, &spec, source);
    report.float("alpha", config.alpha);
    echo_result(&mut report, &result);
    report.emit(args.output.report.as_deref())?;
    write_replicas(&args.output, &result)
}

fn run_mar(args: &MarArgs) -> Result<()> {
    let ds = load(&args.input)?;
    let metric = resolve_metric(args.kernel.metric, &ds);
    let (bw, source) = resolve_bandwidth(args.kernel.bandwidth, || {
        KernelSpec::from_dataset(&ds, metric).map(|s| s.bandwidth())
    })?;
    let spec = KernelSpec::gaussian(bw, metric)?;
    let mut config = MarConfig::new(args.seed);
    config.bootstrap = args.bootstrap;
    config.plus_one = args.plus_one;
    config.l_param = args.l_param;
    config.centered = !args.uncentered;
    config.ipw = ipw_options(&args.ipw);
    let outcome = testing::mar_test(&ds, &spec, &config)?;

    let mut report = Report::new("test-mar");
    echo_input(&mut report, &args.input, &ds);
    echo_kernel(&mut report, &spec, source);
    echo_ipw(&mut report, &config.ipw);
    report.push(
        "features",
        if ds.covariates().is_some() { "covariates" } else { "automatic" },
    );
    report.push(
        "logistic_coefficients",
        outcome
            .model
            .coefficients
            .iter()
            .map(|&c| fmt_f64(c))
            .collect::<Vec<_>>()
            .join(";"),
    );
    report.push("logistic_iterations", outcome.model.iterations);
    report.float("weight_sum", outcome.weights.total());
    report.push("multipliers", if config.centered { "centered" } else { "raw" });
    echo_result(&mut report, &outcome.result);
    report.emit(args.output.report.as_deref())?;
    write_replicas(&args.output, &outcome.result)?;
    if let Some(p) = &args.weights_out {
        let rows = std::iter::once(vec!["id".to_string(), "weight".to_string()]).chain(
            ds.first_observed_ids()
                .zip(outcome.weights.per_record())
                .map(|(id, w)| vec![id.to_string(), fmt_f64(*w)]),
        );
        io::write_table(p, rows)?;
    }
    Ok(())
}

fn run_cluster(args: &ClusterArgs) -> Result<()> {
    let ds = load(&args.input)?;
    let metric = resolve_metric(args.kernel.metric, &ds);
    let opts = ipw_options(&args.ipw);
    let weights: Vec<f64> = if args.unweighted || ds.n2() == 0 {
        vec![1.0 / ds.n1().max(1) as f64; ds.n1()]
    } else {
        pairmmd::missingness::estimate_ipw(&ds, &opts)?.1.complete().to_vec()
    };
    let pairs: Vec<&(Observation, Observation)> = ds.complete().iter().collect();
    let (bw, source) = resolve_bandwidth(args.kernel.bandwidth, || cluster::pair_bandwidth(&pairs, metric))?;
    let gram = cluster::pair_gram(&pairs, bw, metric)?;
    let res = cluster::cluster(&gram, &weights, args.k, args.max_sweeps, args.seed, args.restarts)?;

    let mut rows = vec![vec!["id".to_string(), "cluster".to_string()]];
    for (id, a) in ds.complete_ids().iter().zip(&res.assignment) {
        rows.push(vec![id.clone(), a.map_or("unassigned".to_string(), |c| c.to_string())]);
    }
    for id in ds.first_only_ids().iter().chain(ds.second_only_ids()) {
        rows.push(vec![id.clone(), "unassigned".to_string()]);
    }
    write_text(args.out.as_deref(), &csv_text(rows))?;

    if let Some(p) = &args.means_out {
        let means = cluster::cluster_means(ds.complete(), &res.assignment, args.k);
        let coords: Vec<String> = match ds.complete().first().map(|p| &p.0) {
            Some(Observation::Quantile(q)) => q.grid().points().iter().map(|&t| fmt_f64(t)).collect(),
            Some(o) => (1..=o.values().len()).map(|i| format!("x{i}")).collect(),
            None => Vec::new(),
        };
        let header = ["cluster".to_string(), "timepoint".to_string()].into_iter().chain(coords).collect();
        let mut out = vec![header];
        for (c, (m1, m2)) in means.iter().enumerate() {
            for (tp, m) in [(1, m1), (2, m2)] {
                if !m.is_empty() {
                    out.push(
                        [c.to_string(), tp.to_string()]
                            .into_iter()
                            .chain(m.iter().map(|&v| fmt_f64(v)))
                            .collect(),
                    );
                }
            }
        }
        io::write_table(p, out)?;
    }

    let mut report = Report::new("cluster");
    echo_input(&mut report, &args.input, &ds);
    report.push("metric", metric);
    report.float("bandwidth", bw);
    report.push("bandwidth_source", source);
    report.push("weights", if args.unweighted || ds.n2() == 0 { "uniform" } else { "ipw" });
    echo_ipw(&mut report, &opts);
    report.push("k", args.k);
    report.push("max_sweeps", args.max_sweeps);
    report.push("restarts", args.restarts);
    report.push("seed", args.seed);
    report.float("objective", res.objective);
    report.push("best_restart", res.restart);
    report.push("sweeps", res.sweeps);
    report.push("converged", res.converged);
    report.push("moves", res.trace.len() - 1);
    report.push(
        "cluster_sizes",
        res.state.counts().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
    );
    report.emit(args.report.as_deref())
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::InvalidParameter(format!("expected lo,hi but got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    Ok((parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?))
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let configs: Vec<ScenarioConfig> = if args.full_scale {
        simgen::full_scale_configs(args.seed)
    } else {
        let scenario = match args.scenario {
            ScenarioArg::Mcar => Scenario::Mcar {
                n1: args.n1,
                n2: args.n2,
                n3: args.n3,
            },
            ScenarioArg::Mar => Scenario::Mar { n: args.n },
        };
        let (z1, z2) = (parse_range(&args.z1)?, parse_range(&args.z2)?);
        args.rho
            .iter()
            .map(|&rho| {
                let mut c = ScenarioConfig::new(scenario, rho, z1, z2);
                c.reps = args.reps;
                c.bootstrap = args.bootstrap;
                c.seed = args.seed;
                c
            })
            .collect()
    };
    if configs.is_empty() {
        return Err(Error::InvalidParameter("no correlation values given".into()));
    }
    for c in &configs {
        c.validate()?;
    }
    if args.dataset_out.is_some() || args.covariates_out.is_some() {
        let (ds, _) = simgen::replication_dataset(&configs[0], 0)?;
        if let Some(p) = &args.dataset_out {
            io::write_dataset(&ds, p)?;
        }
        if let Some(p) = &args.covariates_out {
            io::write_covariates(&ds, &["y1", "y2"], p)?;
        }
    }
    let rows = simgen::run_study(&configs, args.level)?;
    let mut table = Vec::new();
    simgen::write_study_csv(&rows, &mut table)?;
    write_text(args.out.as_deref(), &String::from_utf8(table).expect("utf-8 csv"))?;

    let mut report = Report::new("simulate");
    report.push("profile", if args.full_scale { "full-scale" } else { "custom" });
    report.float("level", args.level);
    report.push("seed", args.seed);
    for (i, r) in rows.iter().enumerate() {
        let c = &r.config;
        let key = |k: &str| format!("row{i}.{k}");
        report.push(&key("scenario"), c.scenario.name());
        match c.scenario {
            Scenario::Mcar { n1, n2, n3 } => report.push(&key("sizes"), format!("{n1};{n2};{n3}")),
            Scenario::Mar { n } => report.push(&key("sizes"), n),
        }
        report.float(&key("rho"), c.rho);
        report.push(&key("z1"), format!("{},{}", fmt_f64(c.z1.0), fmt_f64(c.z1.1)));
        report.push(&key("z2"), format!("{},{}", fmt_f64(c.z2.0), fmt_f64(c.z2.1)));
        report.push(&key("reps"), c.reps);
        report.push(&key("bootstrap"), c.bootstrap);
        report.push(&key("rejections"), r.rejections);
        report.float(&key("rejection_rate"), r.rate);
    }
    report.emit(args.report.as_deref())
}

fn run_kde(args: &KdeArgs) -> Result<()> {
    let sample = io::read_sample(&args.input)?;
    let (h, source) = match args.bandwidth {
        Some(h) => (h, "user"),
        None => (silverman_bandwidth(&sample)?, "silverman"),
    };
    if args.points < 2 {
        return Err(Error::InvalidParameter("need at least 2 evaluation points".into()));
    }
    let grid = default_eval_grid(&sample, h, args.points);
    let est = kde_density(&sample, h, &grid)?;
    let rows = std::iter::once(vec!["y".to_string(), "density".to_string()]).chain(
        est.grid
            .iter()
            .zip(&est.density)
            .map(|(y, d)| vec![fmt_f64(*y), fmt_f64(*d)]),
    );
    write_text(args.out.as_deref(), &csv_text(rows))?;
    if args.report.is_some() {
        let mut report = Report::new("kde");
        report.push("input", args.input.display());
        report.push("n", sample.len());
        report.float("bandwidth", h);
        report.push("bandwidth_source", source);
        report.push("points", args.points);
        report.float("integral", est.integral());
        report.emit(args.report.as_deref())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TestMcar(a) => run_mcar(a),
        Command::TestMar(a) => run_mar(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Kde(a) => run_kde(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let start = Instant::now();
    match run(&cli) {
        Ok(()) => {
            eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 1 } else { 2 })
        }
    }
}
