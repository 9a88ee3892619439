use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use robanom::bench::{self, McConfig, McMethod};
use robanom::cluster::{self, FlaggedSets, KmeansConfig};
use robanom::detect::{cellwise_scores, flag_and_merge, read_report, ScoreMatrix, ThresholdConfig, ThresholdMethod, ThresholdSpec};
use robanom::dgp::{inject_outliers, simulate_dgp, DgpParams, MagnitudeUnits, OutlierKind, OutlierSpec};
use robanom::forecast::{read_state, write_state, ForecastConfig, ForecastMethod, NharConfig, RealtimeConfig, RealtimeState};
use robanom::panel::{first_difference, load_panel, load_panel_as, save_panel};
use robanom::pipeline::{detect_residuals, run_pipeline, DetectConfig, Detector, PipelineConfig};
use robanom::scatter::{self, read_diag, read_matrix, ComConfig, MrcdConfig, ScatterMethod};
use robanom::trend::{build_design, fit_panel, read_coefficients, write_coefficients, LteConfig, TrendCycleSpec};
use robanom::typology::{annotate, TypologyConfig};
use robanom::{Day, Error, Layout};

#[derive(Parser)]
#[command(name = "robanom", version, about = "Robust point-anomaly detection for panels of daily series")]
struct Cli {
    /// Cap the worker pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a contaminated panel.
    Simulate(SimulateArgs),
    /// Robust trend-plus-cycle fit of every series.
    Fit(FitArgs),
    /// Robust scatter of a residual panel.
    Scatter(ScatterArgs),
    /// Distance-based cell flags.
    Detect(DetectArgs),
    /// Forecast-based cell flags.
    ForecastDetect(ForecastDetectArgs),
    /// Additive outlier / level shift labels for a report.
    Classify(ClassifyArgs),
    /// Feature k-means with overlap report.
    Cluster(ClusterArgs),
    /// Monte Carlo tables and ROC curves.
    Bench(BenchArgs),
    /// Fit a frozen forecasting state or score new days with it.
    Realtime(RealtimeArgs),
    /// Run the configured stages end to end.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Ao,
    Lso,
    Decay,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 600)]
    d: usize,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0.4)]
    fraction: f64,
    #[arg(long, value_enum, default_value = "ao")]
    kind: KindArg,
    /// Decay weights for `--kind decay`, comma separated.
    #[arg(long, value_delimiter = ',')]
    omega: Vec<f64>,
    /// Magnitude in units of each series' sample std.
    #[arg(long, default_value_t = 1.5)]
    delta: f64,
    #[arg(long, default_value_t = 80)]
    tau: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrendArgs {
    /// Polynomial trend order.
    #[arg(long, default_value_t = 2)]
    v: usize,
    /// Number of harmonics (weekly, monthly, ...).
    #[arg(long, default_value_t = 2)]
    c: usize,
    /// Explicit harmonic periods in days, overriding `--c`.
    #[arg(long, value_delimiter = ',')]
    periods: Vec<f64>,
}

impl TrendArgs {
    fn spec(&self) -> TrendCycleSpec {
        if self.periods.is_empty() {
            TrendCycleSpec::new(self.v, self.c)
        } else {
            TrendCycleSpec {
                trend_order: self.v,
                frequencies: self.periods.iter().map(|p| 2.0 * std::f64::consts::PI / p).collect(),
            }
        }
    }
}

#[derive(Args, Clone)]
struct LteArgs {
    #[arg(long, default_value_t = 0.75)]
    h_frac: f64,
    #[arg(long, default_value_t = 500)]
    subsets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl LteArgs {
    fn config(&self) -> LteConfig {
        LteConfig {
            h_frac: self.h_frac,
            n_subsets: self.subsets,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    trend: TrendArgs,
    #[command(flatten)]
    lte: LteArgs,
    #[arg(long)]
    out_residuals: PathBuf,
    #[arg(long)]
    out_coeffs: Option<PathBuf>,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long)]
    method: ScatterMethod,
    #[arg(long)]
    residuals: PathBuf,
    /// Dense matrix CSV (written by default only when d <= 2000).
    #[arg(long)]
    out_sigma: Option<PathBuf>,
    /// Always write the dense matrix.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    diag: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    method: ScatterMethod,
    #[arg(long, default_value = "quantile:0.9975")]
    threshold: ThresholdMethod,
    #[arg(long)]
    residuals: PathBuf,
    /// Precomputed scatter: a diagonal CSV or a dense matrix.
    #[arg(long)]
    sigma: Option<PathBuf>,
    /// Also score first differences and merge.
    #[arg(long)]
    differenced: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastDetectArgs {
    #[arg(long)]
    residuals: PathBuf,
    #[arg(long, default_value = "har")]
    model: ForecastMethod,
    #[arg(long)]
    train_sample: Option<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.75)]
    trim: f64,
    #[arg(long, default_value_t = 10)]
    hidden: usize,
    #[arg(long, default_value = "quantile:0.9975")]
    threshold: ThresholdMethod,
    /// Score the residual level only.
    #[arg(long)]
    no_differenced: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    residuals: PathBuf,
    #[command(flatten)]
    trend: TrendArgs,
    #[command(flatten)]
    lte: LteArgs,
    #[arg(long, default_value_t = 30)]
    window: usize,
    #[arg(long, default_value_t = 2.0)]
    multiplier: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    residuals: PathBuf,
    #[arg(long)]
    coeffs: PathBuf,
    #[command(flatten)]
    trend: TrendArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flag reports to compare against, as `name=path`.
    #[arg(long = "flags")]
    flags: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    elbow: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    elbow_max: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Table1,
    Table2,
    Roc,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "table1")]
    profile: Profile,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// The full 500-replication study.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<McMethod>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RealtimeArgs {
    /// Fit a new state on this panel.
    #[arg(long, conflicts_with = "state_in")]
    fit: Option<PathBuf>,
    #[arg(long)]
    state_in: Option<PathBuf>,
    /// Long CSV `date,series_id,value` of new days.
    #[arg(long)]
    observations: Option<PathBuf>,
    #[arg(long)]
    state_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "har")]
    model: ForecastMethod,
    #[arg(long, default_value = "quantile:0.9975")]
    threshold: ThresholdMethod,
    #[command(flatten)]
    trend: TrendArgs,
    #[command(flatten)]
    lte: LteArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn create(path: &Path) -> robanom::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn open(path: &Path) -> robanom::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io { path: path.into(), source: e })
}

fn simulate(a: SimulateArgs) -> robanom::Result<()> {
    let kind = match a.kind {
        KindArg::Ao => OutlierKind::Ao,
        KindArg::Lso => OutlierKind::Lso,
        KindArg::Decay => OutlierKind::Decaying(a.omega.clone()),
    };
    let params = DgpParams {
        noise_var: a.noise_var,
        seed: a.seed,
        ..Default::default()
    };
    let clean = simulate_dgp(&params, a.d, a.n)?;
    let (panel, truth) = inject_outliers(&clean, &[OutlierSpec::new(kind, a.tau, a.delta)], a.fraction, MagnitudeUnits::SampleStd)?;
    save_panel(&panel, &a.out)?;
    if let Some(t) = &a.truth {
        truth.write_csv(&panel, create(t)?)?;
    }
    Ok(())
}

fn fit(a: FitArgs) -> robanom::Result<()> {
    let y = load_panel(&a.panel)?;
    let spec = a.trend.spec();
    let pf = fit_panel(&y, &spec, &a.lte.config())?;
    for (id, e) in &pf.failures {
        eprintln!("warning: {id} not fitted: {e}");
    }
    save_panel(&pf.residuals, &a.out_residuals)?;
    if let Some(c) = &a.out_coeffs {
        write_coefficients(pf.residuals.series_ids(), &pf.fits, &spec, create(c)?)?;
    }
    Ok(())
}

fn scatter_cmd(a: ScatterArgs) -> robanom::Result<()> {
    let r = load_panel_as(&a.residuals, Layout::Residual)?;
    if a.method == ScatterMethod::Feau {
        let est = scatter::feau_estimate(&r, &scatter::Feature::ALL)?;
        if let Some(path) = &a.diag {
            let mut w = csv::Writer::from_writer(create(path)?);
            w.write_record(["series_id", "distance"])?;
            for (id, v) in r.series_ids().iter().zip(est.distances.iter()) {
                w.write_record([id.clone(), format!("{v:?}")])?;
            }
            w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
        }
        if let Some(path) = &a.out_sigma {
            scatter::write_matrix(&est.covariance, create(path)?)?;
        }
        return Ok(());
    }
    let est = scatter::estimate(&r, a.method, &MrcdConfig::default(), &ComConfig::default())?;
    if let Some(path) = &a.out_sigma {
        if r.d() <= 2000 || a.full {
            est.write_sigma(create(path)?)?;
        } else {
            eprintln!("note: d = {} > 2000, dense matrix skipped (use --full); see --diag", r.d());
        }
    }
    if let Some(path) = &a.diag {
        est.write_diag(r.series_ids(), create(path)?)?;
    }
    Ok(())
}

fn variances_from(path: &Path, ids: &[String]) -> robanom::Result<Vec<f64>> {
    if let Ok(diag) = read_diag(open(path)?) {
        let map: HashMap<String, f64> = diag.into_iter().collect();
        return ids
            .iter()
            .map(|id| map.get(id).copied().ok_or_else(|| Error::Parse(format!("no variance for {id}"))))
            .collect();
    }
    let m = read_matrix(open(path)?)?;
    if m.nrows() != ids.len() {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: m.nrows(),
        });
    }
    Ok(m.diagonal().iter().copied().collect())
}

fn detect(a: DetectArgs) -> robanom::Result<()> {
    let r = load_panel_as(&a.residuals, Layout::Residual)?;
    let cfg = DetectConfig {
        method: Detector::Distance(a.method),
        threshold: a.threshold.to_string(),
        differenced: a.differenced,
        ..Default::default()
    };
    let report = match &a.sigma {
        None => detect_residuals(&r, &cfg)?.report,
        Some(path) => {
            let raw = cellwise_scores(&r, &variances_from(path, r.series_ids())?)?;
            let tc = ThresholdConfig::default();
            let k_raw = ThresholdSpec::select(&raw.values, a.threshold, &tc)?.kappa;
            let diff: Option<ScoreMatrix> = if a.differenced {
                let dp = first_difference(&r)?;
                Some(robanom::detect::distance_scores(&dp, a.method, &cfg.distance)?.0)
            } else {
                None
            };
            let k_diff = match &diff {
                Some(s) => Some(ThresholdSpec::select(&s.values, a.threshold, &tc)?.kappa),
                None => None,
            };
            flag_and_merge(Some((&raw, k_raw)), diff.as_ref().zip(k_diff), a.method.name())
        }
    };
    report.write_csv(create(&a.out)?)
}

fn forecast_detect(a: ForecastDetectArgs) -> robanom::Result<()> {
    let r = load_panel_as(&a.residuals, Layout::Residual)?;
    let cfg = DetectConfig {
        method: Detector::Forecast(a.model),
        threshold: a.threshold.to_string(),
        differenced: !a.no_differenced,
        forecast: ForecastConfig {
            method: a.model,
            lte: LteConfig {
                seed: a.seed,
                ..Default::default()
            },
            nhar: NharConfig {
                hidden: a.hidden,
                trim: a.trim,
                epochs: a.epochs,
                train_sample: a.train_sample,
                seed: a.seed,
                ..Default::default()
            },
        },
        ..Default::default()
    };
    detect_residuals(&r, &cfg)?.report.write_csv(create(&a.out)?)
}

fn classify(a: ClassifyArgs) -> robanom::Result<()> {
    let y = load_panel(&a.panel)?;
    let r = load_panel_as(&a.residuals, Layout::Residual)?;
    let mut report = read_report(open(&a.report)?)?;
    let design = build_design(y.n(), &a.trend.spec())?;
    let cfg = TypologyConfig {
        window: a.window,
        multiplier: a.multiplier,
        ..Default::default()
    };
    annotate(&mut report, &y, &r, &design, &cfg, &a.lte.config())?;
    report.write_csv(create(&a.out)?)
}

fn cluster_cmd(a: ClusterArgs) -> robanom::Result<()> {
    let r = load_panel_as(&a.residuals, Layout::Residual)?;
    let coefs: HashMap<String, Vec<f64>> = read_coefficients(open(&a.coeffs)?)?.into_iter().collect();
    let aligned = r
        .series_ids()
        .iter()
        .map(|id| coefs.get(id).cloned().ok_or_else(|| Error::Parse(format!("no coefficients for {id}"))))
        .collect::<robanom::Result<Vec<_>>>()?;
    let features = cluster::standardize(&cluster::panel_features(&r, &aligned, &a.trend.spec())?);
    let km = KmeansConfig {
        k: a.k,
        restarts: a.restarts,
        seed: a.seed,
        ..Default::default()
    };
    let model = cluster::kmeans(&features, &km)?;
    cluster::write_labels(r.series_ids(), &model.labels, create(&a.out)?)?;
    if let Some(path) = &a.report {
        let mut detectors = Vec::new();
        for spec in &a.flags {
            let (name, file) = spec
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--flags expects name=path, got {spec:?}")))?;
            let report = read_report(open(Path::new(file))?)?;
            detectors.push((name.to_string(), FlaggedSets::from_report(&report, r.series_ids())));
        }
        let rows = cluster::overlap_report(&model, &features, &detectors);
        cluster::write_overlap(&rows, create(path)?)?;
    }
    if let Some(path) = &a.elbow {
        let curve = cluster::elbow_curve(&features, a.elbow_max.min(features.len()), &km)?;
        cluster::write_elbow(&curve, create(path)?)?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> robanom::Result<()> {
    let mut cfg = McConfig {
        replications: if a.full { 500 } else { a.reps },
        seed: a.seed,
        ..Default::default()
    };
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
    match a.profile {
        Profile::Table1 | Profile::Table2 => {
            if matches!(a.profile, Profile::Table2) {
                cfg.kind = OutlierKind::Lso;
            }
            cfg.thresholds = vec![0.9975, 0.9992, 0.9993, 0.9995];
            bench::run_monte_carlo(&cfg)?.write_csv(create(&a.out)?)
        }
        Profile::Roc => {
            cfg.deltas = vec![1.5];
            let curves = bench::run_roc(&cfg, &bench::roc_grid())?;
            for (m, pts) in &curves {
                eprintln!("{m}: AUC {:.4}", bench::auc(pts));
            }
            bench::write_roc(&curves, create(&a.out)?)
        }
    }
}

/// Observations grouped by date; blank or unparsable values count as missing.
fn read_observations(path: &Path) -> robanom::Result<BTreeMap<Day, HashMap<String, f64>>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out: BTreeMap<Day, HashMap<String, f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Parse("observation rows need date,series_id,value".into()));
        }
        let day = Day::parse(&rec[0])?;
        let entry = out.entry(day).or_default();
        if let Ok(v) = rec[2].trim().parse::<f64>() {
            entry.insert(rec[1].trim().to_string(), v);
        }
    }
    Ok(out)
}

fn realtime(a: RealtimeArgs) -> robanom::Result<()> {
    let mut state = match (&a.fit, &a.state_in) {
        (Some(panel), _) => {
            let cfg = RealtimeConfig {
                trend: a.trend.spec(),
                lte: a.lte.config(),
                forecast: ForecastConfig {
                    method: a.model,
                    lte: a.lte.config(),
                    nhar: NharConfig {
                        seed: a.lte.seed,
                        ..Default::default()
                    },
                },
                threshold: a.threshold,
                ..Default::default()
            };
            RealtimeState::fit(&load_panel(panel)?, &cfg)?
        }
        (None, Some(path)) => read_state(open(path)?)?,
        (None, None) => return Err(Error::InvalidConfig("give --fit PANEL or --state-in FILE".into())),
    };
    if let Some(obs) = &a.observations {
        let days = read_observations(obs)?;
        let mut flags = Vec::new();
        for (day, values) in &days {
            flags.extend(state.step(*day, values)?);
        }
        if let Some(out) = &a.out {
            let mut w = csv::Writer::from_writer(create(out)?);
            w.write_record(["series_id", "date", "level", "score", "kappa"])?;
            for f in &flags {
                w.write_record([
                    f.series_id.clone(),
                    f.date.to_string(),
                    f.level.to_string(),
                    f.score.to_string(),
                    f.kappa.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
    }
    if let Some(path) = &a.state_out {
        write_state(&state, create(path)?)?;
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> robanom::Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let manifest = run_pipeline(&cfg)?;
    for s in &manifest.stages {
        eprintln!("{}: {:?}", s.name, s.status);
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::InvalidConfig(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("warning: thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Scatter(a) => scatter_cmd(a),
        Command::Detect(a) => detect(a),
        Command::ForecastDetect(a) => forecast_detect(a),
        Command::Classify(a) => classify(a),
        Command::Cluster(a) => cluster_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Realtime(a) => realtime(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
