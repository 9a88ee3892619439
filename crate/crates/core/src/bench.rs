//! Monte Carlo harness: simulate, contaminate, score with every detector and
//! count hits and false alarms against the injected truth.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{distance_scores, threshold_quantile, DistanceConfig, ScoreMatrix};
use crate::dgp::{inject_outliers, simulate_dgp, DgpParams, MagnitudeUnits, OutlierKind, OutlierSpec};
use crate::error::{Error, Result};
use crate::forecast::{forecast_scores, ForecastConfig, ForecastMethod};
use crate::panel::{first_difference, Panel};
use crate::scatter::ScatterMethod;
use crate::seed;
use crate::trend::{fit_panel, LteConfig, TrendCycleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum McMethod {
    Ogk,
    Mrcd,
    Com,
    Feau,
    OgkReg,
    MrcdReg,
    ComReg,
    RobAr1,
}

impl McMethod {
    pub const ALL: [McMethod; 8] = [
        McMethod::Ogk,
        McMethod::Mrcd,
        McMethod::Com,
        McMethod::Feau,
        McMethod::OgkReg,
        McMethod::MrcdReg,
        McMethod::ComReg,
        McMethod::RobAr1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            McMethod::Ogk => "OGK",
            McMethod::Mrcd => "MRCD",
            McMethod::Com => "COM",
            McMethod::Feau => "FEAU",
            McMethod::OgkReg => "OGKreg",
            McMethod::MrcdReg => "MRCDreg",
            McMethod::ComReg => "COMreg",
            McMethod::RobAr1 => "RobAR(1)",
        }
    }

    /// Works on the robust residuals rather than the observed data.
    pub fn uses_residuals(self) -> bool {
        matches!(self, McMethod::OgkReg | McMethod::MrcdReg | McMethod::ComReg | McMethod::RobAr1)
    }

    fn scatter(self) -> Option<ScatterMethod> {
        match self {
            McMethod::Ogk | McMethod::OgkReg => Some(ScatterMethod::Ogk),
            McMethod::Mrcd | McMethod::MrcdReg => Some(ScatterMethod::Mrcd),
            McMethod::Com | McMethod::ComReg => Some(ScatterMethod::Com),
            McMethod::Feau => Some(ScatterMethod::Feau),
            McMethod::RobAr1 => None,
        }
    }
}

impl fmt::Display for McMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['(', ')', '_', '-'], "");
        McMethod::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase().replace(['(', ')'], "") == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub d: usize,
    pub n: usize,
    pub replications: usize,
    pub fraction: f64,
    /// 1-based time of the injected outlier.
    pub tau: usize,
    /// Outlier magnitudes in units of each series' sample std.
    pub deltas: Vec<f64>,
    pub kind: OutlierKind,
    pub methods: Vec<McMethod>,
    /// Quantile levels used as thresholds.
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub dgp: DgpParams,
    pub trend: TrendCycleSpec,
    pub lte: LteConfig,
    pub distance: DistanceConfig,
}

/// Noise variance of the benchmark panels, chosen so that RobAR(1) reaches a
/// 0.745 detection share for unit-sd additive outliers.
pub const BENCH_NOISE_VAR: f64 = 25.0;

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            d: 600,
            n: 400,
            replications: 20,
            fraction: 0.4,
            tau: 80,
            deltas: vec![1.0, 1.5],
            kind: OutlierKind::Ao,
            methods: McMethod::ALL.to_vec(),
            thresholds: vec![0.9975],
            seed: 0,
            dgp: DgpParams {
                noise_var: BENCH_NOISE_VAR,
                ..Default::default()
            },
            trend: TrendCycleSpec {
                trend_order: 2,
                frequencies: vec![2.0 * std::f64::consts::PI / 30.0],
            },
            lte: LteConfig::default(),
            distance: DistanceConfig::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 || self.methods.is_empty() || self.deltas.is_empty() {
            return Err(Error::InvalidConfig("need replications, methods and deltas".into()));
        }
        if self.tau < 2 || self.tau >= self.n {
            return Err(Error::InvalidConfig(format!("tau {} outside 2..{}", self.tau, self.n)));
        }
        if self.thresholds.iter().any(|k| !(*k > 0.0 && *k < 1.0)) {
            return Err(Error::InvalidConfig("threshold levels must lie in (0, 1)".into()));
        }
        if !matches!(self.kind, OutlierKind::Ao | OutlierKind::Lso) {
            return Err(Error::InvalidConfig("the harness supports AO and LSO experiments".into()));
        }
        self.dgp.validate()
    }

    fn truth_index(&self) -> usize {
        match self.kind {
            OutlierKind::Lso => self.tau - 2,
            _ => self.tau - 1,
        }
    }

    /// Cells counted as hits around the truth cell.
    fn window(&self) -> usize {
        match self.kind {
            OutlierKind::Lso => 1,
            _ => 0,
        }
    }
}

/// Flag outcome of one (replication, delta, method, threshold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Counts {
    pub detected: usize,
    pub injected: usize,
    pub false_positives: usize,
    pub clean_cells: usize,
}

impl Counts {
    pub fn perc_out(&self) -> Option<f64> {
        (self.injected > 0).then(|| self.detected as f64 / self.injected as f64)
    }
}

/// Scores plus the truth layout they are judged against.
pub struct Scored {
    pub scores: ScoreMatrix,
    /// Contaminated series.
    pub contaminated: usize,
    pub truth_index: usize,
    pub window: usize,
}

impl Scored {
    fn is_truth_window(&self, i: usize, t: usize) -> bool {
        i < self.contaminated && t + self.window >= self.truth_index && t <= self.truth_index + self.window
    }

    /// Count hits and false alarms for `score > kappa`.
    pub fn count(&self, kappa: f64) -> Counts {
        let s = &self.scores;
        let mut c = Counts {
            detected: 0,
            injected: self.contaminated,
            false_positives: 0,
            clean_cells: 0,
        };
        for i in 0..s.d {
            let mut hit = false;
            for t in 0..s.n {
                let v = s.get(i, t);
                if !v.is_finite() {
                    continue;
                }
                if self.is_truth_window(i, t) {
                    hit |= v > kappa;
                } else {
                    c.clean_cells += 1;
                    if v > kappa {
                        c.false_positives += 1;
                    }
                }
            }
            if hit {
                c.detected += 1;
            }
        }
        c
    }

    /// Best score in each contaminated series' truth window, plus every clean cell.
    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let s = &self.scores;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..s.d {
            let mut best = f64::NEG_INFINITY;
            for t in 0..s.n {
                let v = s.get(i, t);
                if !v.is_finite() {
                    continue;
                }
                if self.is_truth_window(i, t) {
                    best = best.max(v);
                } else {
                    neg.push(v);
                }
            }
            if i < self.contaminated {
                pos.push(best);
            }
        }
        (pos, neg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub k: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Quantile levels used for the ROC sweep, finer near one.
pub fn roc_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    g.extend((1..100).map(|i| 0.99 + i as f64 / 10_000.0));
    g
}

/// ROC over `k` in `grid` with `kappa = Q(k)` of the pooled scores; sorted by FPR.
pub fn roc_curve(scored: &Scored, grid: &[f64]) -> Result<Vec<RocPoint>> {
    let mut sorted: Vec<f64> = scored.scores.values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(Error::InsufficientData("no finite scores".into()));
    }
    sorted.sort_unstable_by(f64::total_cmp);
    let mut out = Vec::with_capacity(grid.len());
    for &k in grid {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::InvalidConfig(format!("quantile level {k} outside (0, 1]")));
        }
        let kappa = crate::stats::quantile_sorted(&sorted, k);
        let c = scored.count(kappa);
        out.push(RocPoint {
            k,
            fpr: c.false_positives as f64 / c.clean_cells.max(1) as f64,
            tpr: c.perc_out().unwrap_or(0.0),
        });
    }
    out.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
    Ok(out)
}

/// Trapezoid area under a sorted ROC, closed with (0, 0) and (1, 1).
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut xs = vec![(0.0, 0.0)];
    xs.extend(points.iter().map(|p| (p.fpr, p.tpr)));
    xs.push((1.0, 1.0));
    xs.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Probability that a truth window outscores a clean cell (ties count half).
pub fn rank_auc(scored: &Scored) -> f64 {
    let (pos, mut neg) = scored.split();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    neg.sort_unstable_by(f64::total_cmp);
    let total: f64 = pos
        .iter()
        .map(|p| {
            let below = neg.partition_point(|v| v < p);
            let upto = neg.partition_point(|v| v <= p);
            below as f64 + 0.5 * (upto - below) as f64
        })
        .sum();
    total / (pos.len() as f64 * neg.len() as f64)
}

/// One simulated and contaminated panel.
pub struct Replication {
    pub observed: Panel,
    pub contaminated: usize,
}

pub fn simulate_replication(cfg: &McConfig, rep: usize, delta: f64) -> Result<Replication> {
    let params = DgpParams {
        seed: seed::derive(cfg.seed, &[seed::label("replication"), rep as u64]),
        ..cfg.dgp.clone()
    };
    let clean = simulate_dgp(&params, cfg.d, cfg.n)?;
    let spec = OutlierSpec::new(cfg.kind.clone(), cfg.tau, delta);
    let (observed, truth) = inject_outliers(&clean, &[spec], cfg.fraction, MagnitudeUnits::SampleStd)?;
    Ok(Replication {
        observed,
        contaminated: truth.contaminated_series().len(),
    })
}

/// Score a replication with every requested method.
pub fn score_replication(cfg: &McConfig, rep: &Replication, methods: &[McMethod]) -> Result<Vec<(McMethod, Scored)>> {
    let is_lso = cfg.kind == OutlierKind::Lso;
    let y = &rep.observed;
    let lte = LteConfig {
        seed: seed::derive(cfg.lte.seed, &[seed::label("bench-lte")]),
        ..cfg.lte.clone()
    };
    let needs_reg_distance = methods.iter().any(|m| m.uses_residuals() && m.scatter().is_some());
    let needs_ar = methods.contains(&McMethod::RobAr1);
    let raw_input = if is_lso { Some(first_difference(y)?) } else { None };
    let raw_input = raw_input.as_ref().unwrap_or(y);
    // Residuals of the levels feed the forecaster; for level shifts the
    // distance methods use residuals of the differenced data.
    let level_resid = if needs_ar || (needs_reg_distance && !is_lso) {
        Some(fit_panel(y, &cfg.trend, &lte)?.residuals)
    } else {
        None
    };
    let reg_input = if needs_reg_distance {
        if is_lso {
            Some(fit_panel(raw_input, &cfg.trend, &lte)?.residuals)
        } else {
            level_resid.clone()
        }
    } else {
        None
    };
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let scores = match (m, m.scatter()) {
            (McMethod::RobAr1, _) => {
                let r = level_resid.as_ref().expect("residuals computed");
                let input = if is_lso { first_difference(r)? } else { r.clone() };
                let fc = ForecastConfig {
                    method: ForecastMethod::Ar1,
                    lte: lte.clone(),
                    ..Default::default()
                };
                forecast_scores(&input, &fc)?.0
            }
            (_, Some(s)) => {
                let input = if m.uses_residuals() {
                    reg_input.as_ref().expect("residuals computed")
                } else {
                    raw_input
                };
                distance_scores(input, s, &cfg.distance)?.0
            }
            (_, None) => unreachable!("every non-forecast method has a scatter"),
        };
        out.push((
            m,
            Scored {
                scores,
                contaminated: rep.contaminated,
                truth_index: cfg.truth_index(),
                window: cfg.window(),
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub delta: f64,
    pub method: McMethod,
    pub threshold: f64,
    /// `None` when nothing was injected.
    pub perc_out: Option<f64>,
    pub num_fals_pos: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, delta: f64, method: McMethod, threshold: f64) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.delta == delta && r.method == method && r.threshold == threshold)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["delta", "method", "threshold", "perc_out", "num_fals_pos", "replications", "failures"])?;
        for r in &self.rows {
            w.write_record([
                r.delta.to_string(),
                r.method.name().to_string(),
                r.threshold.to_string(),
                r.perc_out.map_or_else(|| "NA".to_string(), |v| v.to_string()),
                r.num_fals_pos.to_string(),
                r.replications.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("metrics", e))?;
        Ok(())
    }
}

struct RepOutcome {
    counts: Vec<Vec<Counts>>,
    roc: Vec<Vec<RocPoint>>,
}

fn run_one(cfg: &McConfig, rep: usize, delta: f64, grid: Option<&[f64]>) -> Result<RepOutcome> {
    let data = simulate_replication(cfg, rep, delta)?;
    let scored = score_replication(cfg, &data, &cfg.methods)?;
    let mut out = RepOutcome {
        counts: Vec::with_capacity(scored.len()),
        roc: Vec::new(),
    };
    for (_, s) in scored {
        let counts = cfg
            .thresholds
            .iter()
            .map(|&k| Ok(s.count(threshold_quantile(&s.scores.values, k)?.kappa)))
            .collect::<Result<Vec<_>>>()?;
        out.counts.push(counts);
        if let Some(g) = grid {
            out.roc.push(roc_curve(&s, g)?);
        }
    }
    Ok(out)
}

/// An ROC curve averaged over replications at one magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct RocSummary {
    pub delta: f64,
    pub method: McMethod,
    pub points: Vec<RocPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Study {
    pub metrics: MetricsTable,
    pub roc: Vec<RocSummary>,
}

/// Average TPR and FPR per grid level across replications, then sort by FPR.
fn average_roc(per_rep: &[&Vec<RocPoint>], grid: &[f64]) -> Vec<RocPoint> {
    let c = per_rep.len() as f64;
    let mut pts: Vec<RocPoint> = grid
        .iter()
        .map(|&k| {
            let at: Vec<&RocPoint> = per_rep
                .iter()
                .map(|rep| rep.iter().find(|p| p.k == k).expect("grid point"))
                .collect();
            RocPoint {
                k,
                fpr: at.iter().map(|p| p.fpr).sum::<f64>() / c,
                tpr: at.iter().map(|p| p.tpr).sum::<f64>() / c,
            }
        })
        .collect();
    pts.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
    pts
}

/// Run every replication at every magnitude, averaging the counts and, when
/// `grid` is given, the ROC curves from the same scores. Failed replications
/// are logged and left out of the averages.
pub fn run_study(cfg: &McConfig, grid: Option<&[f64]>) -> Result<Study> {
    cfg.validate()?;
    let mut study = Study::default();
    for &delta in &cfg.deltas {
        let outcomes: Vec<Result<RepOutcome>> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_one(cfg, r, delta, grid))
            .collect();
        let mut ok = Vec::new();
        let mut failures = 0;
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(v) => ok.push(v),
                Err(e) => {
                    log::warn!("replication {r} at delta {delta} failed: {e}");
                    failures += 1;
                }
            }
        }
        if ok.is_empty() {
            return Err(Error::Numerical(format!("every replication failed at delta {delta}")));
        }
        for (mi, &method) in cfg.methods.iter().enumerate() {
            for (ti, &threshold) in cfg.thresholds.iter().enumerate() {
                let counts: Vec<Counts> = ok.iter().map(|v| v.counts[mi][ti]).collect();
                let reps = counts.len() as f64;
                let perc: Option<Vec<f64>> = counts.iter().map(Counts::perc_out).collect();
                study.metrics.rows.push(MetricsRow {
                    delta,
                    method,
                    threshold,
                    perc_out: perc.map(|p| p.iter().sum::<f64>() / reps),
                    num_fals_pos: counts.iter().map(|c| c.false_positives as f64).sum::<f64>() / reps,
                    replications: counts.len(),
                    failures,
                });
            }
            if let Some(g) = grid {
                let curves: Vec<&Vec<RocPoint>> = ok.iter().map(|v| &v.roc[mi]).collect();
                study.roc.push(RocSummary {
                    delta,
                    method,
                    points: average_roc(&curves, g),
                });
            }
        }
    }
    Ok(study)
}

pub fn run_monte_carlo(cfg: &McConfig) -> Result<MetricsTable> {
    Ok(run_study(cfg, None)?.metrics)
}

/// ROC curves (one per method) pooled from the replications at the first
/// magnitude of `cfg`.
pub fn run_roc(cfg: &McConfig, grid: &[f64]) -> Result<Vec<(McMethod, Vec<RocPoint>)>> {
    let first = McConfig {
        deltas: cfg.deltas.iter().take(1).copied().collect(),
        ..cfg.clone()
    };
    Ok(run_study(&first, Some(grid))?
        .roc
        .into_iter()
        .map(|r| (r.method, r.points))
        .collect())
}

pub fn write_roc<W: Write>(curves: &[(McMethod, Vec<RocPoint>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "k", "fpr", "tpr"])?;
    for (m, pts) in curves {
        for p in pts {
            w.write_record([m.name().to_string(), p.k.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("roc", e))?;
    Ok(())
}
