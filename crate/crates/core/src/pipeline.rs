//! End-to-end runs driven by a TOML file, with a hashed artifact manifest so
//! unchanged stages are skipped on rerun.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, FlaggedSets, KmeansConfig};
use crate::detect::{distance_scores, flag_and_merge, DistanceConfig, OutlierReport, ScoreMatrix, ThresholdConfig, ThresholdMethod, ThresholdSpec};
use crate::dgp::{inject_outliers, simulate_dgp, DgpParams, MagnitudeUnits, OutlierKind, OutlierSpec};
use crate::error::{Error, Result};
use crate::forecast::{forecast_scores, ForecastConfig, ForecastMethod};
use crate::panel::{first_difference, load_panel, load_panel_as, save_panel, Layout, Panel};
use crate::scatter::ScatterMethod;
use crate::seed;
use crate::trend::{build_design, fit_panel, read_coefficients, write_coefficients, LteConfig, TrendCycleSpec};
use crate::typology::{annotate, TypologyConfig};

/// Second-step detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Detector {
    Distance(ScatterMethod),
    Forecast(ForecastMethod),
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Detector::Distance(m) => m.name(),
            Detector::Forecast(m) => m.name(),
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse::<ScatterMethod>()
            .map(Detector::Distance)
            .or_else(|_| s.parse::<ForecastMethod>().map(Detector::Forecast))
            .map_err(|_| Error::InvalidConfig(format!("unknown detector {s:?}")))
    }
}

impl TryFrom<String> for Detector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Detector> for String {
    fn from(d: Detector) -> String {
        d.name().to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub method: Detector,
    /// `quantile:K`, `linear` or `pareto`.
    pub threshold: String,
    /// Also score the first differences and merge the two levels.
    pub differenced: bool,
    pub threshold_config: ThresholdConfig,
    pub distance: DistanceConfig,
    pub forecast: ForecastConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            method: Detector::Distance(ScatterMethod::Com),
            threshold: "quantile:0.9975".into(),
            differenced: true,
            threshold_config: ThresholdConfig::default(),
            distance: DistanceConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

impl DetectConfig {
    pub fn threshold_method(&self) -> Result<ThresholdMethod> {
        self.threshold.parse()
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub report: OutlierReport,
    pub thresholds: Vec<ThresholdSpec>,
    pub scores: Vec<ScoreMatrix>,
}

fn score_level(p: &Panel, cfg: &DetectConfig) -> Result<ScoreMatrix> {
    match cfg.method {
        Detector::Distance(m) => Ok(distance_scores(p, m, &cfg.distance)?.0),
        Detector::Forecast(m) => {
            let fc = ForecastConfig {
                method: m,
                ..cfg.forecast.clone()
            };
            Ok(forecast_scores(p, &fc)?.0)
        }
    }
}

/// Score residuals (and optionally their differences), pick the cut-offs and
/// merge the flags into one report.
pub fn detect_residuals(residuals: &Panel, cfg: &DetectConfig) -> Result<Detection> {
    let method = cfg.threshold_method()?;
    let mut scores = vec![score_level(residuals, cfg)?];
    if cfg.differenced {
        scores.push(score_level(&first_difference(residuals)?, cfg)?);
    }
    let thresholds = scores
        .iter()
        .map(|s| ThresholdSpec::select(&s.values, method, &cfg.threshold_config))
        .collect::<Result<Vec<_>>>()?;
    let raw = Some((&scores[0], thresholds[0].kappa));
    let diff = scores.get(1).map(|s| (s, thresholds[1].kappa));
    let report = flag_and_merge(raw, diff, cfg.method.name());
    Ok(Detection {
        report,
        thresholds,
        scores,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub d: usize,
    pub n: usize,
    pub fraction: f64,
    pub kind: OutlierKind,
    pub tau: usize,
    pub delta: f64,
    pub dgp: DgpParams,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            d: 50,
            n: 400,
            fraction: 0.4,
            kind: OutlierKind::Ao,
            tau: 80,
            delta: 1.5,
            dgp: DgpParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterStageConfig {
    pub enabled: bool,
    pub k: usize,
    pub restarts: usize,
    /// Elbow curve up to this many clusters (0 skips it).
    pub elbow_max: usize,
}

impl Default for ClusterStageConfig {
    fn default() -> Self {
        ClusterStageConfig {
            enabled: false,
            k: 5,
            restarts: 50,
            elbow_max: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads (0 = all cores); applied by the caller.
    pub threads: usize,
    pub output_dir: PathBuf,
    /// Observed panel; when absent a contaminated panel is simulated.
    pub input: Option<PathBuf>,
    pub simulate: SimulateConfig,
    pub trend: TrendCycleSpec,
    pub lte: LteConfig,
    pub detect: DetectConfig,
    pub typology: TypologyConfig,
    pub cluster: ClusterStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 0,
            output_dir: PathBuf::from("out"),
            input: None,
            simulate: SimulateConfig::default(),
            trend: TrendCycleSpec::default(),
            lte: LteConfig::default(),
            detect: DetectConfig::default(),
            typology: TypologyConfig::default(),
            cluster: ClusterStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(input) = cfg.input.as_mut() {
            if input.is_relative() {
                *input = base.join(&*input);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(input) = &self.input {
            if !input.is_file() {
                return Err(Error::InvalidConfig(format!("input {} does not exist", input.display())));
            }
        }
        self.trend.validate()?;
        self.typology.validate()?;
        self.detect.threshold_method()?;
        self.simulate.dgp.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage configuration, its seed and its input artifacts.
    pub key: String,
    pub seed: u64,
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn stage_key(name: &str, section: &impl Serialize, seed: u64, inputs: &[&Artifact]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(serde_json::to_vec(section).map_err(|e| Error::InvalidConfig(e.to_string()))?);
    h.update(seed.to_le_bytes());
    for a in inputs {
        h.update(a.path.as_bytes());
        h.update(a.sha256.as_bytes());
    }
    Ok(format!("{:x}", h.finalize()))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

struct Runner {
    dir: PathBuf,
    previous: Manifest,
    manifest: Manifest,
}

impl Runner {
    fn artifact(&self, name: &str) -> Result<Artifact> {
        Ok(Artifact {
            path: name.to_string(),
            sha256: sha256_file(&self.dir.join(name))?,
        })
    }

    fn cached(&self, name: &str, key: &str) -> Option<StageRecord> {
        let old = self.previous.stage(name)?;
        if old.key != key || old.status == StageStatus::Failed {
            return None;
        }
        let intact = old
            .artifacts
            .iter()
            .all(|a| sha256_file(&self.dir.join(&a.path)).map_or(false, |h| h == a.sha256));
        intact.then(|| StageRecord {
            status: StageStatus::Cached,
            ..old.clone()
        })
    }

    /// Run a stage unless an identical earlier run left intact outputs.
    fn stage<F>(&mut self, name: &str, key: String, seed: u64, outputs: &[&str], body: F) -> Result<Vec<Artifact>>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        if let Some(rec) = self.cached(name, &key) {
            log::info!("stage {name}: cached");
            let arts = rec.artifacts.clone();
            self.manifest.stages.push(rec);
            return Ok(arts);
        }
        log::info!("stage {name}: running");
        let result = body(&self.dir).and_then(|_| outputs.iter().map(|o| self.artifact(o)).collect::<Result<Vec<_>>>());
        match result {
            Ok(artifacts) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    key,
                    seed,
                    status: StageStatus::Ran,
                    artifacts: artifacts.clone(),
                    error: None,
                });
                Ok(artifacts)
            }
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    key,
                    seed,
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    error: Some(e.to_string()),
                });
                Err(e)
            }
        }
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn run_stages(cfg: &PipelineConfig, r: &mut Runner) -> Result<()> {
    let sim_seed = seed::derive(cfg.seed, &[seed::label("simulate")]);
    let fit_seed = seed::derive(cfg.seed, &[seed::label("fit")]);
    let detect_seed = seed::derive(cfg.seed, &[seed::label("detect")]);
    let classify_seed = seed::derive(cfg.seed, &[seed::label("classify")]);
    let cluster_seed = seed::derive(cfg.seed, &[seed::label("cluster")]);

    let observed = match &cfg.input {
        Some(input) => {
            let src = Artifact {
                path: input.display().to_string(),
                sha256: sha256_file(input)?,
            };
            let key = stage_key("ingest", &(), 0, &[&src])?;
            r.stage("ingest", key, 0, &["observed.csv"], |dir| {
                save_panel(&load_panel(input)?, &dir.join("observed.csv"))
            })?
        }
        None => {
            let key = stage_key("simulate", &cfg.simulate, sim_seed, &[])?;
            let s = &cfg.simulate;
            r.stage("simulate", key, sim_seed, &["observed.csv", "truth.csv"], |dir| {
                let params = DgpParams {
                    seed: sim_seed,
                    ..s.dgp.clone()
                };
                let clean = simulate_dgp(&params, s.d, s.n)?;
                let spec = OutlierSpec::new(s.kind.clone(), s.tau, s.delta);
                let (panel, truth) = inject_outliers(&clean, &[spec], s.fraction, MagnitudeUnits::SampleStd)?;
                save_panel(&panel, &dir.join("observed.csv"))?;
                truth.write_csv(&panel, create(&dir.join("truth.csv"))?)
            })?
        }
    };
    let observed_art = observed[0].clone();

    let key = stage_key("fit", &(&cfg.trend, &cfg.lte), fit_seed, &[&observed_art])?;
    let fitted = r.stage("fit", key, fit_seed, &["residuals.csv", "coefficients.csv"], |dir| {
        let y = load_panel(&dir.join("observed.csv"))?;
        let lte = LteConfig {
            seed: fit_seed,
            ..cfg.lte.clone()
        };
        let pf = fit_panel(&y, &cfg.trend, &lte)?;
        save_panel(&pf.residuals, &dir.join("residuals.csv"))?;
        write_coefficients(pf.residuals.series_ids(), &pf.fits, &cfg.trend, create(&dir.join("coefficients.csv"))?)
    })?;

    let key = stage_key("detect", &cfg.detect, detect_seed, &[&fitted[0]])?;
    let detected = r.stage("detect", key, detect_seed, &["report.csv"], |dir| {
        let res = load_panel_as(&dir.join("residuals.csv"), Layout::Residual)?;
        let mut dc = cfg.detect.clone();
        dc.forecast.lte.seed = seed::derive(detect_seed, &[seed::label("lte")]);
        dc.forecast.nhar.seed = seed::derive(detect_seed, &[seed::label("nhar")]);
        let det = detect_residuals(&res, &dc)?;
        det.report.write_csv(create(&dir.join("report.csv"))?)
    })?;

    let key = stage_key(
        "classify",
        &(&cfg.typology, &cfg.trend, &cfg.lte),
        classify_seed,
        &[&observed_art, &fitted[0], &detected[0]],
    )?;
    let classified = r.stage("classify", key, classify_seed, &["classified.csv"], |dir| {
        let y = load_panel(&dir.join("observed.csv"))?;
        let res = load_panel_as(&dir.join("residuals.csv"), Layout::Residual)?;
        let file = dir.join("report.csv");
        let mut report = crate::detect::read_report(fs::File::open(&file).map_err(|e| Error::io(&file, e))?)?;
        let design = build_design(y.n(), &cfg.trend)?;
        let lte = LteConfig {
            seed: classify_seed,
            ..cfg.lte.clone()
        };
        annotate(&mut report, &y, &res, &design, &cfg.typology, &lte)?;
        report.write_csv(create(&dir.join("classified.csv"))?)
    })?;

    if cfg.cluster.enabled {
        let key = stage_key("cluster", &(&cfg.cluster, &cfg.trend), cluster_seed, &[&fitted[0], &fitted[1], &classified[0]])?;
        let mut outputs = vec!["labels.csv", "overlap.csv", "refined.csv"];
        if cfg.cluster.elbow_max > 0 {
            outputs.push("elbow.csv");
        }
        r.stage("cluster", key, cluster_seed, &outputs, |dir| {
            let res = load_panel_as(&dir.join("residuals.csv"), Layout::Residual)?;
            let file = dir.join("coefficients.csv");
            let coefs = read_coefficients(fs::File::open(&file).map_err(|e| Error::io(&file, e))?)?;
            let coefs: Vec<Vec<f64>> = coefs.into_iter().map(|(_, c)| c).collect();
            let file = dir.join("classified.csv");
            let report = crate::detect::read_report(fs::File::open(&file).map_err(|e| Error::io(&file, e))?)?;
            let features = cluster::standardize(&cluster::panel_features(&res, &coefs, &cfg.trend)?);
            let km = KmeansConfig {
                k: cfg.cluster.k,
                restarts: cfg.cluster.restarts,
                seed: cluster_seed,
                ..Default::default()
            };
            let model = cluster::kmeans(&features, &km)?;
            let sets = FlaggedSets::from_report(&report, res.series_ids());
            cluster::write_labels(res.series_ids(), &model.labels, create(&dir.join("labels.csv"))?)?;
            let rows = cluster::overlap_report(&model, &features, &[(cfg.detect.method.name().to_string(), sets.clone())]);
            cluster::write_overlap(&rows, create(&dir.join("overlap.csv"))?)?;
            let (_, subset) = cluster::refined_subset(&model, &sets.any);
            let mut w = csv::Writer::from_writer(create(&dir.join("refined.csv"))?);
            w.write_record(["series_id"])?;
            for i in subset {
                w.write_record([res.series_ids()[i].as_str()])?;
            }
            w.flush().map_err(|e| Error::io("refined.csv", e))?;
            if cfg.cluster.elbow_max > 0 {
                let curve = cluster::elbow_curve(&features, cfg.cluster.elbow_max.min(features.len()), &km)?;
                cluster::write_elbow(&curve, create(&dir.join("elbow.csv"))?)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Execute every stage in order and write `manifest.json` to the output
/// directory, also when a stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let manifest_path = cfg.output_dir.join(MANIFEST);
    let previous = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    let mut runner = Runner {
        dir: cfg.output_dir.clone(),
        previous,
        manifest: Manifest::default(),
    };
    let outcome = run_stages(cfg, &mut runner);
    runner.save()?;
    outcome.map(|_| runner.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_names() {
        assert_eq!("com".parse::<Detector>().unwrap(), Detector::Distance(ScatterMethod::Com));
        assert_eq!("robhar".parse::<Detector>().unwrap(), Detector::Forecast(ForecastMethod::Har));
        assert_eq!("nhar".parse::<Detector>().unwrap(), Detector::Forecast(ForecastMethod::Nhar));
        assert!("pca".parse::<Detector>().is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
            seed = 7
            output_dir = "run"
            [simulate]
            d = 20
            kind = "lso"
            [detect]
            method = "robhar"
            threshold = "linear"
        "#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.simulate.d, 20);
        assert_eq!(cfg.simulate.kind, OutlierKind::Lso);
        assert_eq!(cfg.detect.method, Detector::Forecast(ForecastMethod::Har));
        assert_eq!(cfg.detect.threshold_method().unwrap(), ThresholdMethod::Linear);
        let again = PipelineConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again.detect.method, cfg.detect.method);
        assert!(PipelineConfig::from_toml("[detect]\nmethod = 3").is_err());
    }

    #[test]
    fn missing_input_is_rejected() {
        let cfg = PipelineConfig {
            input: Some("/nonexistent/panel.csv".into()),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
