//! Cellwise scoring, threshold selection and flag reporting.

mod report;
mod threshold;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pinv_sym;
use crate::panel::{Day, Layout, Panel};
use crate::scatter::{self, ComConfig, MrcdConfig, ScatterEstimate, ScatterMethod};
use crate::stats;

pub use report::{flag_and_merge, flag_cells, read_report, Event, OutlierReport};
pub use threshold::{
    threshold_linear_logtail, threshold_pareto_logtail, threshold_quantile, TailFit, ThresholdConfig, ThresholdMethod, ThresholdSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Raw,
    Differenced,
    Both,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Raw => "raw",
            Level::Differenced => "differenced",
            Level::Both => "both",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Level::Raw),
            "differenced" | "diff" => Ok(Level::Differenced),
            "both" => Ok(Level::Both),
            _ => Err(Error::Parse(format!("unknown level {s:?}"))),
        }
    }
}

/// Standardized cell scores, stored series-major like [`Panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Vec<f64>,
    pub d: usize,
    pub n: usize,
    pub series_ids: Vec<String>,
    pub dates: Vec<Day>,
    pub level: Level,
}

impl ScoreMatrix {
    /// Wrap raw per-cell statistics of a panel, z-scoring them over the
    /// pooled set of finite cells.
    pub fn pooled(p: &Panel, mut raw: Vec<f64>) -> Result<ScoreMatrix> {
        if raw.len() != p.d() * p.n() {
            return Err(Error::DimensionMismatch {
                expected: p.d() * p.n(),
                got: raw.len(),
            });
        }
        zscore_pooled(&mut raw);
        Ok(ScoreMatrix {
            values: raw,
            d: p.d(),
            n: p.n(),
            series_ids: p.series_ids().to_vec(),
            dates: p.dates().to_vec(),
            level: level_of(p.layout()),
        })
    }

    pub fn series(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.n + t]
    }
}

fn level_of(layout: Layout) -> Level {
    match layout {
        Layout::Differenced => Level::Differenced,
        _ => Level::Raw,
    }
}

/// In-place z-score over finite entries; all zeros when the spread is zero.
pub fn zscore_pooled(values: &mut [f64]) {
    let (m, sd, _) = stats::finite_mean_std(values.iter().copied());
    for v in values.iter_mut() {
        *v = if sd > 0.0 && v.is_finite() { (*v - m) / sd } else if v.is_finite() { 0.0 } else { *v };
    }
}

/// `sqrt(r' S^+ r)`; singular scatters use the pseudo-inverse.
pub fn mahalanobis(r: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if sigma.nrows() != r.len() || sigma.ncols() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: sigma.nrows(),
            got: r.len(),
        });
    }
    let (inv, rank) = pinv_sym(sigma);
    if rank < r.len() {
        log::debug!("mahalanobis: scatter rank {rank} < {}", r.len());
    }
    Ok(quad_form(&inv, r).max(0.0).sqrt())
}

fn quad_form(m: &DMatrix<f64>, r: &[f64]) -> f64 {
    let d = r.len();
    let mut acc = 0.0;
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += m[(i, j)] * r[i];
        }
        acc += s * r[j];
    }
    acc
}

/// Mahalanobis distance of every day's cross-section `r_t`.
pub fn row_distances(p: &Panel, est: &ScatterEstimate) -> Result<Vec<f64>> {
    if est.dim() != p.d() {
        return Err(Error::DimensionMismatch {
            expected: est.dim(),
            got: p.d(),
        });
    }
    let (inv, _) = pinv_sym(&est.sigma);
    Ok((0..p.n())
        .into_par_iter()
        .map(|t| {
            let r: Vec<f64> = (0..p.d()).map(|i| p.get(i, t)).collect();
            quad_form(&inv, &r).max(0.0).sqrt()
        })
        .collect())
}

/// `c_ti = r_ti^2 / sigma_ii`, then z-scored over all cells.
pub fn cellwise_scores(p: &Panel, variances: &[f64]) -> Result<ScoreMatrix> {
    if variances.len() != p.d() {
        return Err(Error::DimensionMismatch {
            expected: p.d(),
            got: variances.len(),
        });
    }
    if let Some(i) = variances.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Degenerate(format!(
            "non-positive variance for series {}",
            p.series_ids()[i]
        )));
    }
    let n = p.n();
    let mut raw = vec![0.0; p.d() * n];
    raw.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let inv = 1.0 / variances[i];
        for (o, r) in out.iter_mut().zip(p.series(i)) {
            *o = r * r * inv;
        }
    });
    ScoreMatrix::pooled(p, raw)
}

/// Subtract each series' median (used when estimators run on raw data).
pub fn center_by_median(p: &Panel) -> Result<Panel> {
    let n = p.n();
    let mut values = p.values().to_vec();
    values.par_chunks_mut(n).for_each(|row| {
        let m = stats::median(row);
        row.iter_mut().for_each(|v| *v -= m);
    });
    p.with_values(values, p.layout())
}

/// Configuration shared by the distance detectors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceConfig {
    pub mrcd: MrcdConfig,
    pub com: ComConfig,
}

/// Score a panel with a scatter estimator. Raw panels are median-centred
/// first; FEAU uses per-series mean and variance.
pub fn distance_scores(p: &Panel, method: ScatterMethod, cfg: &DistanceConfig) -> Result<(ScoreMatrix, Option<ScatterEstimate>)> {
    if method == ScatterMethod::Feau {
        return Ok((feau_cell_scores(p)?, None));
    }
    let centered;
    let input = if p.layout() == Layout::Raw {
        centered = center_by_median(p)?;
        &centered
    } else {
        p
    };
    let est = scatter::estimate(input, method, &cfg.mrcd, &cfg.com)?;
    let scores = cellwise_scores(input, &est.variances())?;
    Ok((scores, Some(est)))
}

/// Non-robust cell scores `(y - mean)^2 / var` per series.
pub fn feau_cell_scores(p: &Panel) -> Result<ScoreMatrix> {
    let n = p.n();
    let mut raw = vec![0.0; p.d() * n];
    raw.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let y = p.series(i);
        let m = stats::mean(y);
        let v = stats::std_dev(y).powi(2);
        for (o, x) in out.iter_mut().zip(y) {
            *o = if v > 0.0 { (x - m).powi(2) / v } else { 0.0 };
        }
    });
    ScoreMatrix::pooled(p, raw)
}
