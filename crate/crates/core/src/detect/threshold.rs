//! Data-driven cut-offs for pooled score distributions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, total_cmp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    Quantile(f64),
    Linear,
    Pareto,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMethod::Quantile(k) => write!(f, "quantile:{k}"),
            ThresholdMethod::Linear => f.write_str("linear"),
            ThresholdMethod::Pareto => f.write_str("pareto"),
        }
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ThresholdMethod::Linear),
            "pareto" => Ok(ThresholdMethod::Pareto),
            _ => {
                let k = s
                    .strip_prefix("quantile:")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown threshold {s:?}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("threshold {s:?}: {e}")))?;
                if !(k > 0.0 && k <= 1.0) {
                    return Err(Error::InvalidConfig(format!("quantile level {k} outside (0, 1]")));
                }
                Ok(ThresholdMethod::Quantile(k))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    /// Upper fraction of scores forming the tail.
    pub tail_fraction: f64,
    /// Break when standardized residuals exceed this many RMSEs.
    pub rmse_multiplier: f64,
    /// Consecutive exceeding bins needed to call a break.
    pub min_run: usize,
    /// Share of the tail scores covered by the first line fit.
    pub initial_fit_fraction: f64,
    pub max_refits: usize,
    pub min_scores: usize,
    /// Pareto scale is this quantile of the positive scores.
    pub pareto_quantile: f64,
    /// Break when the fitted survival falls below this share of the empirical.
    pub survival_ratio: f64,
    pub min_exceedances: usize,
    pub min_tail_points: usize,
    pub fallback_quantile: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tail_fraction: 0.05,
            rmse_multiplier: 2.0,
            min_run: 2,
            initial_fit_fraction: 0.9,
            max_refits: 10,
            min_scores: 200,
            pareto_quantile: 0.95,
            survival_ratio: 0.25,
            min_exceedances: 5,
            min_tail_points: 20,
            fallback_quantile: 0.9975,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TailFit {
    None,
    Linear {
        intercept: f64,
        slope: f64,
        rmse: f64,
        bin_width: f64,
        bins: usize,
    },
    Pareto {
        z_m: f64,
        rho: f64,
        tail_points: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub method: ThresholdMethod,
    pub kappa: f64,
    /// True when no tail break was found and the fallback quantile was used.
    pub fallback: bool,
    pub fit: TailFit,
}

impl ThresholdSpec {
    pub fn select(scores: &[f64], method: ThresholdMethod, cfg: &ThresholdConfig) -> Result<ThresholdSpec> {
        match method {
            ThresholdMethod::Quantile(k) => threshold_quantile(scores, k),
            ThresholdMethod::Linear => threshold_linear_logtail(scores, cfg),
            ThresholdMethod::Pareto => threshold_pareto_logtail(scores, cfg),
        }
    }
}

fn sorted_finite(scores: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = scores.iter().copied().filter(|v| v.is_finite()).collect();
    v.sort_unstable_by(total_cmp);
    v
}

pub fn threshold_quantile(scores: &[f64], k: f64) -> Result<ThresholdSpec> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidConfig(format!("quantile level {k} outside (0, 1]")));
    }
    let sorted = sorted_finite(scores);
    if sorted.is_empty() {
        return Err(Error::InsufficientData("no finite scores".into()));
    }
    Ok(ThresholdSpec {
        method: ThresholdMethod::Quantile(k),
        kappa: quantile_sorted(&sorted, k),
        fallback: false,
        fit: TailFit::None,
    })
}

fn fallback(method: ThresholdMethod, sorted: &[f64], cfg: &ThresholdConfig, fit: TailFit) -> ThresholdSpec {
    ThresholdSpec {
        method,
        kappa: quantile_sorted(sorted, cfg.fallback_quantile),
        fallback: true,
        fit,
    }
}

/// Weighted least squares line; returns (intercept, slope).
fn wls_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - mx).powi(2);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Upper-tail Poisson probability turned into a one-sided normal score.
fn poisson_z(count: usize, lambda: f64) -> f64 {
    if count == 0 {
        return f64::NEG_INFINITY;
    }
    let lambda = lambda.max(1e-300);
    let p = match Poisson::new(lambda) {
        Ok(d) => d.sf(count as u64 - 1),
        Err(_) => return f64::NEG_INFINITY,
    };
    if p <= 0.0 {
        return f64::INFINITY;
    }
    -Normal::standard().inverse_cdf(p.min(1.0))
}

/// Histogram the top tail with Freedman-Diaconis bins, fit a line to the
/// log counts of the non-empty bins and cut where the counts rise
/// significantly above it.
///
/// Each bin is scored by the Poisson probability of its count given the
/// fitted count, expressed as a normal deviate, so sparse far-tail bins are
/// not mistaken for excess. A break needs `min_run` adjacent bins above
/// `rmse_multiplier` times the RMSE of those scores (floored at one); the line
/// is refitted on the bins below the break until it stops moving.
pub fn threshold_linear_logtail(scores: &[f64], cfg: &ThresholdConfig) -> Result<ThresholdSpec> {
    let method = ThresholdMethod::Linear;
    let sorted = sorted_finite(scores);
    if sorted.len() < cfg.min_scores {
        return Err(Error::InsufficientData(format!(
            "{} finite scores, need {}",
            sorted.len(),
            cfg.min_scores
        )));
    }
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate("all scores are equal".into()));
    }
    let lo = quantile_sorted(&sorted, 1.0 - cfg.tail_fraction);
    let tail: Vec<f64> = sorted.iter().copied().filter(|v| *v >= lo).collect();
    let m = tail.len();
    let iqr = quantile_sorted(&tail, 0.75) - quantile_sorted(&tail, 0.25);
    let width = 2.0 * iqr / (m as f64).cbrt();
    if !(width > 0.0) || !width.is_finite() {
        return Ok(fallback(method, &sorted, cfg, TailFit::None));
    }
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for z in &tail {
        *hist.entry(((z - lo) / width).floor() as u64).or_default() += 1;
    }
    let nbins = *hist.keys().next_back().unwrap() as usize + 1;
    let counts: Vec<usize> = (0..nbins as u64).map(|k| hist.get(&k).copied().unwrap_or(0)).collect();
    let center = |k: usize| lo + (k as f64 + 0.5) * width;
    let filled: Vec<usize> = (0..nbins).filter(|&k| counts[k] > 0).collect();
    if filled.len() < 3 {
        return Ok(fallback(method, &sorted, cfg, TailFit::None));
    }

    let run = cfg.min_run.max(1);
    // Start from the bins holding the bulk of the tail and grow or shrink the
    // fitted range to the latest break until it settles.
    let bulk_bin = ((quantile_sorted(&tail, cfg.initial_fit_fraction) - lo) / width).floor() as usize;
    let mut end = (bulk_bin + 1).max(filled[2] + 1).min(nbins);
    let mut result: Option<(usize, f64, f64, f64)> = None;
    let mut last_fit = TailFit::None;
    for _ in 0..=cfg.max_refits {
        let fit: Vec<usize> = filled.iter().copied().filter(|&k| k < end).collect();
        if fit.len() < 3 {
            break;
        }
        let x: Vec<f64> = fit.iter().map(|&k| center(k)).collect();
        let y: Vec<f64> = fit.iter().map(|&k| (counts[k] as f64 + 1.0).ln()).collect();
        let w: Vec<f64> = fit
            .iter()
            .map(|&k| (counts[k] as f64 + 1.0).powi(2) / counts[k] as f64)
            .collect();
        let Some((a, b)) = wls_line(&x, &y, &w) else {
            break;
        };
        let z: Vec<f64> = (0..nbins)
            .map(|k| poisson_z(counts[k], (a + b * center(k)).exp() - 1.0))
            .collect();
        let fitted_z: Vec<f64> = fit.iter().map(|&k| z[k]).filter(|v| v.is_finite()).collect();
        let rmse = (fitted_z.iter().map(|v| v * v).sum::<f64>() / fitted_z.len().max(1) as f64).sqrt();
        let cut = cfg.rmse_multiplier * rmse.max(1.0);
        last_fit = TailFit::Linear {
            intercept: a,
            slope: b,
            rmse,
            bin_width: width,
            bins: filled.len(),
        };
        match (0..nbins.saturating_sub(run - 1)).find(|&k| z[k..k + run].iter().all(|v| *v > cut)) {
            None if end == nbins => {
                result = None;
                break;
            }
            None => end = nbins,
            Some(k) => {
                let settled = result.is_some_and(|r| r.0 == k);
                result = Some((k, a, b, rmse));
                if settled {
                    break;
                }
                end = k;
            }
        }
    }
    let Some((k, intercept, slope, rmse)) = result else {
        return Ok(fallback(method, &sorted, cfg, last_fit));
    };
    Ok(ThresholdSpec {
        method,
        kappa: center(k),
        fallback: false,
        fit: TailFit::Linear {
            intercept,
            slope,
            rmse,
            bin_width: width,
            bins: filled.len(),
        },
    })
}

/// Fit a Pareto law to the upper tail of the positive scores by maximum
/// likelihood and cut at the first tail score above which the data are
/// markedly heavier than the fit: the fitted survival is below
/// `survival_ratio` times the empirical one and at least `min_exceedances`
/// scores lie at or above it.
pub fn threshold_pareto_logtail(scores: &[f64], cfg: &ThresholdConfig) -> Result<ThresholdSpec> {
    let method = ThresholdMethod::Pareto;
    let sorted = sorted_finite(scores);
    let pos: Vec<f64> = sorted.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.len() < cfg.min_scores {
        return Err(Error::InsufficientData(format!(
            "{} positive scores, need {}",
            pos.len(),
            cfg.min_scores
        )));
    }
    let z_m = quantile_sorted(&pos, cfg.pareto_quantile);
    let start = pos.partition_point(|v| *v < z_m);
    let tail = &pos[start..];
    let m = tail.len();
    if m < cfg.min_tail_points {
        return Err(Error::InsufficientData(format!("{m} tail points, need {}", cfg.min_tail_points)));
    }
    let s: f64 = tail.iter().map(|z| (z / z_m).ln()).sum();
    if !(s > 0.0) {
        return Err(Error::Degenerate("tail scores are all equal".into()));
    }
    let rho = m as f64 / s;
    let fit = TailFit::Pareto {
        z_m,
        rho,
        tail_points: m,
    };
    let mut k = 0;
    while k < m {
        let z = tail[k];
        let above = m - k;
        if above < cfg.min_exceedances {
            break;
        }
        let empirical = above as f64 / m as f64;
        let fitted = (z_m / z).powf(rho);
        if fitted < cfg.survival_ratio * empirical {
            return Ok(ThresholdSpec {
                method,
                kappa: z,
                fallback: false,
                fit,
            });
        }
        // Ties share one survival value: the share of scores >= z.
        k += tail[k..].partition_point(|v| *v <= z).max(1);
    }
    Ok(fallback(method, &sorted, cfg, fit))
}
