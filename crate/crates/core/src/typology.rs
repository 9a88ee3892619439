//! Additive-outlier versus level-shift classification of flagged cells and
//! sign recovery through a dummy regressor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detect::OutlierReport;
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::stats::{self, MAD_NORMAL};
use crate::trend::{lte_fit, Design, LteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Typology {
    #[serde(rename = "AO")]
    Ao,
    #[serde(rename = "LSO")]
    Lso,
    #[serde(rename = "unclassified")]
    Unclassified,
}

impl fmt::Display for Typology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Typology::Ao => "AO",
            Typology::Lso => "LSO",
            Typology::Unclassified => "unclassified",
        })
    }
}

impl FromStr for Typology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AO" | "ao" => Ok(Typology::Ao),
            "LSO" | "lso" => Ok(Typology::Lso),
            "unclassified" => Ok(Typology::Unclassified),
            _ => Err(Error::Parse(format!("unknown typology {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "unknown")]
    Unknown,
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Positive => "+",
            Sign::Negative => "-",
            Sign::Unknown => "unknown",
        })
    }
}

impl FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" => Ok(Sign::Positive),
            "-" | "\u{2212}" => Ok(Sign::Negative),
            "unknown" => Ok(Sign::Unknown),
            _ => Err(Error::Parse(format!("unknown sign {s:?}"))),
        }
    }
}

/// How the residual spread used by the classification rules is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualScale {
    /// Standardized residuals are taken to have unit spread.
    Unit,
    /// Normal-consistent MAD of the standardized residuals without the
    /// flagged point, falling back to one when it vanishes.
    Mad,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TypologyConfig {
    pub window: usize,
    pub multiplier: f64,
    /// Minimum number of points on each side of the flag.
    pub min_side: usize,
    pub scale: ResidualScale,
    /// Check the level-shift rule before the additive rule.
    pub shift_first: bool,
}

impl Default for TypologyConfig {
    fn default() -> Self {
        TypologyConfig {
            window: 30,
            multiplier: 2.0,
            min_side: 5,
            scale: ResidualScale::Mad,
            shift_first: true,
        }
    }
}

impl TypologyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.multiplier > 0.0) || self.min_side == 0 {
            return Err(Error::InvalidConfig(
                "typology window and min_side must be >= 1 and multiplier > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Residuals divided by their normal-consistent MAD; unchanged if it is zero.
pub fn standardize_residuals(r: &[f64]) -> Vec<f64> {
    let s = MAD_NORMAL * stats::mad(r);
    if s > 0.0 {
        r.iter().map(|v| v / s).collect()
    } else {
        r.to_vec()
    }
}

fn residual_scale(rz: &[f64], tau: usize, cfg: &TypologyConfig) -> f64 {
    match cfg.scale {
        ResidualScale::Unit => 1.0,
        ResidualScale::Mad => {
            let rest: Vec<f64> = rz
                .iter()
                .enumerate()
                .filter(|(t, _)| *t != tau)
                .map(|(_, v)| *v)
                .collect();
            let s = if rest.is_empty() { 0.0 } else { MAD_NORMAL * stats::mad(&rest) };
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }
    }
}

/// Compare the window means before and after `tau` with each other and with
/// the flagged value.
pub fn classify(rz: &[f64], tau: usize, cfg: &TypologyConfig) -> Typology {
    let n = rz.len();
    if tau >= n {
        return Typology::Unclassified;
    }
    let before = &rz[tau.saturating_sub(cfg.window)..tau];
    let after = &rz[tau + 1..(tau + 1 + cfg.window).min(n)];
    if before.len() < cfg.min_side || after.len() < cfg.min_side {
        return Typology::Unclassified;
    }
    let (sb, sa) = (stats::mean(before), stats::mean(after));
    let cut = cfg.multiplier * residual_scale(rz, tau, cfg);
    let shift = (sb - sa).abs() > cut;
    let additive = (rz[tau] - sa).abs() > cut && (rz[tau] - sb).abs() > cut;
    match (cfg.shift_first, shift, additive) {
        (true, true, _) | (false, true, false) => Typology::Lso,
        (_, _, true) => Typology::Ao,
        _ => Typology::Unclassified,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignEstimate {
    pub sign: Sign,
    pub delta_hat: f64,
    pub residuals: Vec<f64>,
}

/// Refit the robust trend with a dummy for the event and read the sign and
/// size off its coefficient.
///
/// A level shift uses the step `1{t > tau}` and is refitted by trimmed least
/// squares. The pulse `1{t = tau}` only touches one row, so its coefficient is
/// the residual of that row under the robust fit without the dummy.
pub fn infer_sign(y: &[f64], design: &Design, tau: usize, kind: Typology, lte: &LteConfig) -> Result<SignEstimate> {
    let n = y.len();
    if tau >= n {
        return Err(Error::InvalidConfig(format!("event index {tau} outside series of length {n}")));
    }
    let (delta_hat, residuals) = match kind {
        Typology::Ao => {
            let fit = lte_fit(y, design, lte)?;
            let mut residuals = fit.residuals;
            let delta = residuals[tau];
            residuals[tau] = 0.0;
            (delta, residuals)
        }
        Typology::Lso => {
            if tau + 1 >= n {
                return Err(Error::Singular(format!("level-shift dummy at {tau} has no support")));
            }
            let dummy: Vec<f64> = (0..n).map(|t| if t > tau { 1.0 } else { 0.0 }).collect();
            let fit = lte_fit(y, &design.with_column(&dummy), lte)?;
            (*fit.coefficients.last().unwrap(), fit.residuals)
        }
        Typology::Unclassified => {
            return Ok(SignEstimate {
                sign: Sign::Unknown,
                delta_hat: f64::NAN,
                residuals: Vec::new(),
            })
        }
    };
    let sign = if delta_hat > 0.0 {
        Sign::Positive
    } else if delta_hat < 0.0 {
        Sign::Negative
    } else {
        Sign::Unknown
    };
    Ok(SignEstimate {
        sign,
        delta_hat,
        residuals,
    })
}

/// Fill typology, sign and magnitude for every event of a report.
///
/// `residuals` and `observed` must share series ids and dates with the level
/// the events were dated against. Events whose series is missing or whose
/// refit fails keep an unknown sign.
pub fn annotate(
    report: &mut OutlierReport,
    observed: &Panel,
    residuals: &Panel,
    design: &Design,
    cfg: &TypologyConfig,
    lte: &LteConfig,
) -> Result<()> {
    cfg.validate()?;
    let index: std::collections::HashMap<&str, usize> = residuals
        .series_ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let obs_index: std::collections::HashMap<&str, usize> = observed
        .series_ids()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let dates = residuals.dates();
    let standardized: Vec<Option<Vec<f64>>> = vec![None; residuals.d()];
    let mut standardized = standardized;
    for e in report.events.iter_mut() {
        let (Some(&i), Some(&j)) = (index.get(e.series_id.as_str()), obs_index.get(e.series_id.as_str())) else {
            e.typology = Some(Typology::Unclassified);
            e.sign = Some(Sign::Unknown);
            continue;
        };
        let Ok(tau) = dates.binary_search(&e.date) else {
            e.typology = Some(Typology::Unclassified);
            e.sign = Some(Sign::Unknown);
            continue;
        };
        let rz = standardized[i].get_or_insert_with(|| standardize_residuals(residuals.series(i)));
        let kind = classify(rz, tau, cfg);
        e.typology = Some(kind);
        match infer_sign(observed.series(j), design, tau, kind, lte) {
            Ok(s) => {
                e.sign = Some(s.sign);
                e.delta_hat = s.delta_hat.is_finite().then_some(s.delta_hat);
            }
            Err(err) => {
                log::warn!("sign inference for {} at {}: {err}", e.series_id, e.date);
                e.sign = Some(Sign::Unknown);
            }
        }
    }
    Ok(())
}
