//! Forecast-error detectors: robust HAR and AR(1) regressions, a trimmed
//! neural HAR, and frozen-model real-time scoring.

mod har;
mod nhar;
mod realtime;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::ScoreMatrix;
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::seed;
use crate::stats::{self, MAD_NORMAL};
use crate::trend::LteConfig;

pub use har::{har_features, robhar_fit, HarKind, HarModel, HAR_WINDOW};
pub use nhar::{series_rows, train_rows, NeuralHar, NharConfig};
pub use realtime::{read_state, write_state, LevelState, RealtimeConfig, RealtimeState, StepFlag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMethod {
    Har,
    Ar1,
    Nhar,
}

impl ForecastMethod {
    pub fn name(self) -> &'static str {
        match self {
            ForecastMethod::Har => "robhar",
            ForecastMethod::Ar1 => "robar1",
            ForecastMethod::Nhar => "robnhar",
        }
    }
}

impl fmt::Display for ForecastMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForecastMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "har" | "robhar" => Ok(ForecastMethod::Har),
            "ar1" | "robar1" => Ok(ForecastMethod::Ar1),
            "nhar" | "robnhar" => Ok(ForecastMethod::Nhar),
            _ => Err(Error::Parse(format!("unknown forecasting model {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub method: ForecastMethod,
    pub lte: LteConfig,
    pub nhar: NharConfig,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            method: ForecastMethod::Har,
            lte: LteConfig::default(),
            nhar: NharConfig::default(),
        }
    }
}

/// Fitted one-step forecasters for every series of a panel.
#[derive(Debug, Clone, PartialEq)]
pub enum Forecasters {
    Linear(Vec<HarModel>),
    /// One pooled network, or one per series; inputs are divided by the
    /// series' scale.
    Neural { nets: Vec<NeuralHar>, input_scales: Vec<f64> },
}

impl Forecasters {
    pub fn len(&self) -> usize {
        match self {
            Forecasters::Linear(m) => m.len(),
            Forecasters::Neural { input_scales, .. } => input_scales.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Earlier values needed before the first forecast.
    pub fn min_history(&self) -> usize {
        match self {
            Forecasters::Linear(m) => m.iter().map(|m| m.kind.min_history()).max().unwrap_or(1),
            Forecasters::Neural { .. } => HAR_WINDOW,
        }
    }

    /// Forecast for series `i` of the value following `history`.
    pub fn predict(&self, i: usize, history: &[f64]) -> f64 {
        match self {
            Forecasters::Linear(m) => m[i].predict(history),
            Forecasters::Neural { nets, input_scales } => {
                let net = if nets.len() == 1 { &nets[0] } else { &nets[i] };
                net.predict_history(history, input_scales[i])
            }
        }
    }
}

/// Normal-consistent MAD, then the standard deviation, then one.
pub(crate) fn robust_scale(x: &[f64]) -> f64 {
    let finite: Vec<f64> = x.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return 1.0;
    }
    let s = MAD_NORMAL * stats::mad(&finite);
    if s > 0.0 {
        return s;
    }
    let sd = stats::std_dev(&finite);
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Signed one-step errors `r_t - forecast_t`; NaN where history is too short.
pub fn forecast_errors(f: &Forecasters, i: usize, r: &[f64]) -> Vec<f64> {
    let start = f.min_history();
    (0..r.len())
        .map(|t| if t < start { f64::NAN } else { r[t] - f.predict(i, &r[..t]) })
        .collect()
}

/// Squared one-step prediction errors; NaN where history is too short.
pub fn prediction_errors(f: &Forecasters, i: usize, r: &[f64]) -> Vec<f64> {
    forecast_errors(f, i, r).into_iter().map(|e| e * e).collect()
}

/// Fit the configured forecaster to every series of a residual panel.
/// Series whose robust fit fails fall back to a zero forecast.
pub fn fit_forecasters(p: &Panel, cfg: &ForecastConfig) -> Result<Forecasters> {
    match cfg.method {
        ForecastMethod::Har | ForecastMethod::Ar1 => {
            let kind = if cfg.method == ForecastMethod::Har { HarKind::Har } else { HarKind::Ar1 };
            let models = (0..p.d())
                .into_par_iter()
                .map(|i| {
                    let lte = LteConfig {
                        seed: seed::derive(cfg.lte.seed, &[seed::label("har"), i as u64]),
                        ..cfg.lte.clone()
                    };
                    robhar_fit(p.series(i), kind, &lte).unwrap_or_else(|e| {
                        log::warn!("{kind} fit for {} failed: {e}; using a zero forecast", p.series_ids()[i]);
                        HarModel::zero(kind)
                    })
                })
                .collect();
            Ok(Forecasters::Linear(models))
        }
        ForecastMethod::Nhar => fit_neural(p, &cfg.nhar),
    }
}

fn fit_neural(p: &Panel, cfg: &NharConfig) -> Result<Forecasters> {
    cfg.validate()?;
    let input_scales: Vec<f64> = (0..p.d()).map(|i| robust_scale(p.series(i))).collect();
    if cfg.per_series {
        let nets = (0..p.d())
            .into_par_iter()
            .map(|i| {
                let (mut x, mut y) = (Vec::new(), Vec::new());
                series_rows(p.series(i), input_scales[i], &mut x, &mut y);
                let c = NharConfig {
                    seed: seed::derive(cfg.seed, &[seed::label("series"), i as u64]),
                    ..cfg.clone()
                };
                train_rows(&x, &y, &c)
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Forecasters::Neural { nets, input_scales });
    }
    let chosen: Vec<usize> = match cfg.train_sample {
        Some(k) if k < p.d() => {
            let mut rng = seed::rng(cfg.seed, &[seed::label("train-sample")]);
            let mut v = sample(&mut rng, p.d(), k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..p.d()).collect(),
    };
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for &i in &chosen {
        series_rows(p.series(i), input_scales[i], &mut x, &mut y);
    }
    let net = train_rows(&x, &y, cfg)?;
    Ok(Forecasters::Neural {
        nets: vec![net],
        input_scales,
    })
}

/// Forecasters plus everything needed to score new errors the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFit {
    pub method: ForecastMethod,
    pub forecasters: Forecasters,
    /// Robust scale of each series' in-sample forecast errors.
    pub error_scales: Vec<f64>,
    /// Mean and standard deviation of the pooled standardized squared errors.
    pub score_mean: f64,
    pub score_sd: f64,
}

impl ForecastFit {
    /// Pooled z-score of a new error on series `i`.
    pub fn score(&self, i: usize, error: f64) -> f64 {
        let c = (error / self.error_scales[i]).powi(2);
        if self.score_sd > 0.0 {
            (c - self.score_mean) / self.score_sd
        } else {
            0.0
        }
    }
}

/// Score every cell by its squared forecast error over the series' robust
/// error scale, z-scored over the pooled cells.
pub fn forecast_scores(p: &Panel, cfg: &ForecastConfig) -> Result<(ScoreMatrix, ForecastFit)> {
    let forecasters = fit_forecasters(p, cfg)?;
    score_with(p, forecasters, cfg.method)
}

pub(crate) fn score_with(p: &Panel, forecasters: Forecasters, method: ForecastMethod) -> Result<(ScoreMatrix, ForecastFit)> {
    if forecasters.len() != p.d() {
        return Err(Error::DimensionMismatch {
            expected: forecasters.len(),
            got: p.d(),
        });
    }
    if p.n() <= forecasters.min_history() {
        return Err(Error::InsufficientData(format!(
            "series of length {} leave no forecastable days",
            p.n()
        )));
    }
    let per_series: Vec<(Vec<f64>, f64)> = (0..p.d())
        .into_par_iter()
        .map(|i| {
            let e = forecast_errors(&forecasters, i, p.series(i));
            let s = robust_scale(&e);
            (e.iter().map(|v| (v / s).powi(2)).collect(), s)
        })
        .collect();
    let error_scales = per_series.iter().map(|(_, s)| *s).collect();
    let raw: Vec<f64> = per_series.into_iter().flat_map(|(c, _)| c).collect();
    let (score_mean, score_sd, _) = stats::finite_mean_std(raw.iter().copied());
    let scores = ScoreMatrix::pooled(p, raw)?;
    Ok((
        scores,
        ForecastFit {
            method,
            forecasters,
            error_scales,
            score_mean,
            score_sd,
        },
    ))
}
