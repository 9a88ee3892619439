//! Heterogeneous autoregression on robust residuals, fitted by trimmed least
//! squares.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trend::{lte_fit, Design, LteConfig};

/// Longest look-back window of the features.
pub const HAR_WINDOW: usize = 30;

/// `(r[t-1], mean r[t-7..t], mean r[t-30..t])` for a 0-based index `t`; only
/// values strictly before `t` are read.
pub fn har_features(r: &[f64], t: usize) -> Result<[f64; 3]> {
    if t < HAR_WINDOW || t > r.len() {
        return Err(Error::InsufficientData(format!(
            "features at index {t} need {HAR_WINDOW} earlier values"
        )));
    }
    Ok(features_from_history(&r[..t]))
}

/// Features for the value following `history` (at least 30 entries).
pub(crate) fn features_from_history(history: &[f64]) -> [f64; 3] {
    let t = history.len();
    let week = history[t - 7..].iter().sum::<f64>() / 7.0;
    let month = history[t - HAR_WINDOW..].iter().sum::<f64>() / HAR_WINDOW as f64;
    [history[t - 1], week, month]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarKind {
    /// Daily, weekly and monthly components.
    Har,
    /// First lag only.
    Ar1,
}

impl HarKind {
    /// Earlier values needed before the first forecast.
    pub fn min_history(self) -> usize {
        match self {
            HarKind::Har => HAR_WINDOW,
            HarKind::Ar1 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            HarKind::Har => 3,
            HarKind::Ar1 => 1,
        }
    }
}

impl fmt::Display for HarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HarKind::Har => "har",
            HarKind::Ar1 => "ar1",
        })
    }
}

impl FromStr for HarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "har" => Ok(HarKind::Har),
            "ar1" => Ok(HarKind::Ar1),
            _ => Err(Error::Parse(format!("unknown autoregression {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarModel {
    pub kind: HarKind,
    /// Daily, weekly and monthly coefficients; the last two are zero for AR(1).
    pub phi: [f64; 3],
}

impl HarModel {
    pub fn zero(kind: HarKind) -> HarModel {
        HarModel { kind, phi: [0.0; 3] }
    }

    /// One-step forecast of the value following `history`.
    pub fn predict(&self, history: &[f64]) -> f64 {
        debug_assert!(history.len() >= self.kind.min_history());
        match self.kind {
            HarKind::Ar1 => self.phi[0] * history[history.len() - 1],
            HarKind::Har => {
                let v = features_from_history(history);
                self.phi[0] * v[0] + self.phi[1] * v[1] + self.phi[2] * v[2]
            }
        }
    }
}

fn design_rows(r: &[f64], kind: HarKind) -> (Design, Vec<f64>) {
    let start = kind.min_history();
    let rows: Vec<Vec<f64>> = (start..r.len())
        .map(|t| match kind {
            HarKind::Ar1 => vec![r[t - 1]],
            HarKind::Har => features_from_history(&r[..t]).to_vec(),
        })
        .collect();
    (Design::from_rows(&rows), r[start..].to_vec())
}

/// Trimmed least-squares fit without intercept over every usable row.
pub fn robhar_fit(r: &[f64], kind: HarKind, lte: &LteConfig) -> Result<HarModel> {
    let need = kind.min_history() + 4 * kind.width();
    if r.len() < need {
        return Err(Error::InsufficientData(format!(
            "{kind} fit needs at least {need} values, got {}",
            r.len()
        )));
    }
    let (design, y) = design_rows(r, kind);
    let fit = lte_fit(&y, &design, lte)?;
    let mut phi = [0.0; 3];
    phi[..kind.width()].copy_from_slice(&fit.coefficients);
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite autoregressive coefficient".into()));
    }
    Ok(HarModel { kind, phi })
}
