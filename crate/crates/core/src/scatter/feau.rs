//! Non-robust benchmark: Mahalanobis distances of series in a space of
//! summary features.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pinv_sym;
use crate::panel::Panel;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Mean,
    StdDev,
    Skewness,
    Kurtosis,
    Median,
    Iqr,
    Min,
    Max,
}

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::Mean,
        Feature::StdDev,
        Feature::Skewness,
        Feature::Kurtosis,
        Feature::Median,
        Feature::Iqr,
        Feature::Min,
        Feature::Max,
    ];

    pub fn compute(self, x: &[f64]) -> f64 {
        match self {
            Feature::Mean => stats::mean(x),
            Feature::StdDev => stats::std_dev(x),
            Feature::Skewness => stats::skewness(x),
            Feature::Kurtosis => stats::kurtosis(x),
            Feature::Median => stats::median(x),
            Feature::Iqr => stats::iqr(x),
            Feature::Min => x.iter().copied().fold(f64::INFINITY, f64::min),
            Feature::Max => x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Feature::Mean => "mean",
            Feature::StdDev => "std_dev",
            Feature::Skewness => "skewness",
            Feature::Kurtosis => "kurtosis",
            Feature::Median => "median",
            Feature::Iqr => "iqr",
            Feature::Min => "min",
            Feature::Max => "max",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct FeauEstimate {
    /// Features kept (constant ones are dropped).
    pub features: Vec<Feature>,
    /// Standardized features, one row per series.
    pub standardized: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Mahalanobis distance of each series in feature space.
    pub distances: Vec<f64>,
    /// Numerical rank of the feature covariance.
    pub rank: usize,
}

pub fn feau_estimate(y: &Panel, features: &[Feature]) -> Result<FeauEstimate> {
    let (d, n) = (y.d(), y.n());
    if n < 5 {
        return Err(Error::InsufficientData(format!("feau needs n >= 5, got {n}")));
    }
    if d < 2 {
        return Err(Error::InsufficientData("feau needs at least two series".into()));
    }
    let mut kept = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for &f in features {
        let v: Vec<f64> = (0..d).map(|i| f.compute(y.series(i))).collect();
        let sd = stats::std_dev(&v);
        let size = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        // Rounding noise on an otherwise constant feature is treated as constant.
        if !(sd > 1e-10 * size) || !sd.is_finite() {
            log::warn!("feau: feature {f} is constant across series, dropped");
            continue;
        }
        let m = stats::mean(&v);
        columns.push(v.iter().map(|x| (x - m) / sd).collect());
        kept.push(f);
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("every feau feature is constant".into()));
    }
    let p = kept.len();
    let fz = DMatrix::from_fn(d, p, |i, j| columns[j][i]);
    let mean = DVector::from_fn(p, |j, _| fz.column(j).mean());
    let mut centered = fz.clone();
    for j in 0..p {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let covariance = crate::linalg::symmetrize(centered.transpose() * &centered / (d as f64 - 1.0));
    let (inv, rank) = pinv_sym(&covariance);
    let distances = (0..d)
        .map(|i| {
            let r = centered.row(i).transpose();
            (r.transpose() * &inv * &r)[(0, 0)].max(0.0).sqrt()
        })
        .collect();
    Ok(FeauEstimate {
        features: kept,
        standardized: fz,
        mean,
        covariance,
        distances,
        rank,
    })
}
