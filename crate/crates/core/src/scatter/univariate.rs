//! Univariate robust scales and the comedian.

use std::sync::OnceLock;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::stats::{mad_in_place, median_in_place, MAD_NORMAL};

const TAU_C1: f64 = 4.5;
const TAU_C2: f64 = 3.0;

/// `E[min(Z^2, c^2)]` for standard normal `Z`.
fn truncated_second_moment(c: f64) -> f64 {
    let n = Normal::standard();
    2.0 * ((1.0 - c * c) * n.cdf(c) - c * n.pdf(c) + c * c) - 1.0
}

fn tau_consistency() -> f64 {
    static K: OnceLock<f64> = OnceLock::new();
    // rho is evaluated on residuals divided by the raw MAD, which is
    // 1/1.4826 of sigma under normality.
    *K.get_or_init(|| truncated_second_moment(TAU_C2 / MAD_NORMAL))
}

/// Tau location and scale, using `buf` as scratch. Scale is zero when the MAD
/// is zero.
pub(crate) fn tau_location_scale_buf(x: &[f64], buf: &mut Vec<f64>) -> (f64, f64) {
    buf.clear();
    buf.extend_from_slice(x);
    let (med, s0) = mad_in_place(buf);
    if !(s0 > 0.0) || !s0.is_finite() {
        return (med, 0.0);
    }
    let (mut sw, mut swx) = (0.0, 0.0);
    let k = TAU_C1 * s0;
    for &v in x {
        let u = (v - med) / k;
        if u.abs() < 1.0 {
            let w = (1.0 - u * u).powi(2);
            sw += w;
            swx += w * v;
        }
    }
    let mu = swx / sw;
    let c2 = TAU_C2 * TAU_C2;
    let acc: f64 = x
        .iter()
        .map(|v| {
            let u = (v - mu) / s0;
            (u * u).min(c2)
        })
        .sum();
    let tau2 = s0 * s0 * acc / x.len() as f64;
    (mu, (tau2 / tau_consistency()).sqrt())
}

/// Tau-scale of `x` (Yohai-Zamar, c1 = 4.5, c2 = 3), consistent for the
/// normal standard deviation. Returns 0 when more than half the values tie.
pub fn tau_scale(x: &[f64]) -> f64 {
    let mut buf = Vec::with_capacity(x.len());
    tau_location_scale_buf(x, &mut buf).1
}

pub fn tau_location_scale(x: &[f64]) -> (f64, f64) {
    let mut buf = Vec::with_capacity(x.len());
    tau_location_scale_buf(x, &mut buf)
}

/// `med((x - med x) * (y - med y))`.
pub fn comedian(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::InsufficientData("comedian of empty vectors".into()));
    }
    let mx = crate::stats::median(x);
    let my = crate::stats::median(y);
    let mut prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    Ok(median_in_place(&mut prod))
}

/// Comedian of two already median-centred vectors.
pub(crate) fn comedian_centered(x: &[f64], y: &[f64], buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(x.iter().zip(y).map(|(a, b)| a * b));
    median_in_place(buf)
}
