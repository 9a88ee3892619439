//! Structural time-series simulator and outlier injection.
//!
//! Each series is a local linear trend plus a monthly cubic seasonal pattern
//! plus Gaussian noise. Contamination is added as a sparse signature matrix
//! with a ground-truth registry.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Day, Layout, Panel};
use crate::seed;

/// Simulation parameters. Per-series variances are `scale * phi` with a
/// fresh `phi ~ U(0, 1)` per series unless `fixed_phi` pins them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpParams {
    /// Level-disturbance variance is `level_var_scale * phi_1`.
    pub level_var_scale: f64,
    /// Slope-disturbance variance is `slope_var_scale * phi_2`.
    pub slope_var_scale: f64,
    /// Variance of the disturbance added to the seasonal pattern.
    pub cycle_noise_var: f64,
    /// Seasonal scale is `seasonal_scale * phi_3`.
    pub seasonal_scale: f64,
    /// Observation-noise variance (diagonal of the noise scatter).
    pub noise_var: f64,
    /// Optional cross-sectional noise correlation (d x d, PD).
    #[serde(skip)]
    pub noise_corr: Option<DMatrix<f64>>,
    /// Day offsets of the seasonal control points within the 30-day month.
    pub control_points: [f64; 4],
    /// Override the per-series uniform draws.
    pub fixed_phi: Option<[f64; 5]>,
    pub start: Day,
    pub seed: u64,
}

impl Default for DgpParams {
    fn default() -> Self {
        DgpParams {
            level_var_scale: 1e-3,
            slope_var_scale: 1e-3,
            cycle_noise_var: 0.0,
            seasonal_scale: 1e2,
            noise_var: 1.0,
            noise_corr: None,
            control_points: [0.0, 14.0, 15.0, 30.0],
            fixed_phi: None,
            start: Day::from_ymd(2021, 4, 1).expect("valid date"),
            seed: 0,
        }
    }
}

pub const SEASON_PERIOD: f64 = 30.0;

impl DgpParams {
    /// Every stochastic term switched off.
    pub fn noise_free() -> Self {
        DgpParams {
            level_var_scale: 0.0,
            slope_var_scale: 0.0,
            cycle_noise_var: 0.0,
            seasonal_scale: 0.0,
            noise_var: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vars = [
            self.level_var_scale,
            self.slope_var_scale,
            self.cycle_noise_var,
            self.seasonal_scale,
            self.noise_var,
        ];
        if vars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("variances must be >= 0".into()));
        }
        let cp = self.control_points;
        if cp.windows(2).any(|w| w[1] <= w[0]) || cp[0] < 0.0 || cp[3] > SEASON_PERIOD {
            return Err(Error::InvalidConfig(format!(
                "control points {cp:?} must be strictly increasing within [0, 30]"
            )));
        }
        Ok(())
    }
}

/// Natural cubic spline through the four control points, evaluated on the
/// day-of-month and repeated every 30 days.
#[derive(Debug, Clone)]
pub struct MonthlyCubic {
    knots: [f64; 4],
    /// Per segment `(a, b, c, d)` with `s = a + b u + c u^2 + d u^3`, `u = t - knot`.
    coeffs: [[f64; 4]; 3],
}

impl MonthlyCubic {
    pub fn new(knots: [f64; 4], values: [f64; 4]) -> MonthlyCubic {
        let h = [knots[1] - knots[0], knots[2] - knots[1], knots[3] - knots[2]];
        let slope = |i: usize| (values[i + 1] - values[i]) / h[i];
        // Natural ends: M0 = M3 = 0; 2x2 system for the interior curvatures.
        let r1 = 6.0 * (slope(1) - slope(0));
        let r2 = 6.0 * (slope(2) - slope(1));
        let (a11, a12, a21, a22) = (2.0 * (h[0] + h[1]), h[1], h[1], 2.0 * (h[1] + h[2]));
        let det = a11 * a22 - a12 * a21;
        let m = [
            0.0,
            (r1 * a22 - a12 * r2) / det,
            (a11 * r2 - a21 * r1) / det,
            0.0,
        ];
        let mut coeffs = [[0.0; 4]; 3];
        for i in 0..3 {
            coeffs[i] = [
                values[i],
                slope(i) - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
                m[i] / 2.0,
                (m[i + 1] - m[i]) / (6.0 * h[i]),
            ];
        }
        MonthlyCubic { knots, coeffs }
    }

    /// Value at (1-based) time `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let u = t.rem_euclid(SEASON_PERIOD);
        let u = u.clamp(self.knots[0], self.knots[3]);
        let seg = if u < self.knots[1] {
            0
        } else if u < self.knots[2] {
            1
        } else {
            2
        };
        let x = u - self.knots[seg];
        let [a, b, c, d] = self.coeffs[seg];
        a + x * (b + x * (c + x * d))
    }
}

/// Simulate a `d x n` panel.
pub fn simulate_dgp(params: &DgpParams, d: usize, n: usize) -> Result<Panel> {
    params.validate()?;
    if d == 0 || n == 0 {
        return Err(Error::InvalidConfig("d and n must be >= 1".into()));
    }
    let mut values = vec![0.0; d * n];
    let mut noise = vec![0.0; d * n];
    for i in 0..d {
        let mut rng = seed::rng(params.seed, &[seed::label("dgp-series"), i as u64]);
        let phi: [f64; 5] = match params.fixed_phi {
            Some(p) => p,
            None => std::array::from_fn(|_| rng.gen::<f64>()),
        };
        let sd_level = (params.level_var_scale * phi[0]).sqrt();
        let sd_slope = (params.slope_var_scale * phi[1]).sqrt();
        let sd_cycle = params.cycle_noise_var.sqrt();
        let sigma_s = params.seasonal_scale * phi[2];
        let (a1, a3) = (sigma_s * phi[3], sigma_s * phi[4]);
        let season = MonthlyCubic::new(params.control_points, [a1, a1, a3, a3]);
        let sd_noise = params.noise_var.sqrt();
        let (mut level, mut slope) = (0.0f64, 0.0f64);
        let row = &mut values[i * n..(i + 1) * n];
        for (t, cell) in row.iter_mut().enumerate() {
            let z_level: f64 = rng.sample(StandardNormal);
            let z_slope: f64 = rng.sample(StandardNormal);
            let z_cycle: f64 = rng.sample(StandardNormal);
            let z_noise: f64 = rng.sample(StandardNormal);
            level += slope + sd_level * z_level;
            slope += sd_slope * z_slope;
            let cycle = season.eval((t + 1) as f64) + sd_cycle * z_cycle;
            *cell = level + cycle;
            noise[i * n + t] = sd_noise * z_noise;
        }
    }
    if let Some(corr) = &params.noise_corr {
        if corr.nrows() != d || corr.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: corr.nrows(),
            });
        }
        let chol = corr
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("noise scatter is not PD".into()))?;
        let l = chol.l();
        let mut mixed = vec![0.0; d * n];
        for t in 0..n {
            for i in 0..d {
                mixed[i * n + t] = (0..=i).map(|k| l[(i, k)] * noise[k * n + t]).sum();
            }
        }
        noise = mixed;
    }
    for (v, e) in values.iter_mut().zip(&noise) {
        *v += e;
    }
    let ids = (0..d).map(|i| format!("s{i}")).collect();
    let dates = (0..n as i64).map(|t| Day(params.start.0 + t)).collect();
    Panel::new(ids, dates, values, Layout::Raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierKind {
    /// One-period spike.
    Ao,
    /// Permanent step from `tau` on.
    Lso,
    /// Impulse response of `1 / (1 - w1 L - ... - wp L^p)`.
    Decaying(Vec<f64>),
}

impl OutlierKind {
    pub fn name(&self) -> &'static str {
        match self {
            OutlierKind::Ao => "ao",
            OutlierKind::Lso => "lso",
            OutlierKind::Decaying(_) => "decay",
        }
    }

    fn validate(&self) -> Result<()> {
        if let OutlierKind::Decaying(w) = self {
            let ok = !w.is_empty()
                && w[0] < 1.0
                && w.windows(2).all(|p| p[1] < p[0])
                && w.iter().all(|v| *v > 0.0);
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "decay polynomial {w:?} must satisfy 1 > w1 > ... > wp > 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeUnits {
    /// `delta` multiplies the series' pre-contamination sample std.
    SampleStd,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub kind: OutlierKind,
    /// 1-based time index.
    pub tau: usize,
    pub delta: f64,
}

impl OutlierSpec {
    pub fn new(kind: OutlierKind, tau: usize, delta: f64) -> OutlierSpec {
        OutlierSpec { kind, tau, delta }
    }
}

/// Below this magnitude the decaying response is cut off.
const DECAY_CUTOFF: f64 = 1e-12;

/// Unit-magnitude signature of length `n` for an outlier at 1-based `tau`.
pub fn signature(kind: &OutlierKind, n: usize, tau: usize) -> Result<Vec<f64>> {
    if tau == 0 || tau > n {
        return Err(Error::InvalidConfig(format!("tau {tau} outside 1..={n}")));
    }
    kind.validate()?;
    let start = tau - 1;
    let mut s = vec![0.0; n];
    match kind {
        OutlierKind::Ao => s[start] = 1.0,
        OutlierKind::Lso => s[start..].iter_mut().for_each(|v| *v = 1.0),
        OutlierKind::Decaying(w) => {
            let mut psi: Vec<f64> = Vec::new();
            for k in 0..(n - start) {
                let v = if k == 0 {
                    1.0
                } else {
                    w.iter()
                        .enumerate()
                        .filter(|(j, _)| *j < k)
                        .map(|(j, wj)| wj * psi[k - 1 - j])
                        .sum()
                };
                if k > 0 && v.abs() < DECAY_CUTOFF {
                    break;
                }
                psi.push(v);
                s[start + k] = v;
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub series: usize,
    /// 1-based time index.
    pub tau: usize,
    pub kind: OutlierKind,
    /// Absolute magnitude added.
    pub delta: f64,
}

/// Registry of injected outliers, unique per `(series, tau)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
}

impl GroundTruth {
    pub fn contaminated_series(&self) -> std::collections::BTreeSet<usize> {
        self.entries.iter().map(|e| e.series).collect()
    }

    pub fn write_csv<W: Write>(&self, p: &Panel, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["series_id", "tau", "date", "kind", "delta"])?;
        for e in &self.entries {
            w.write_record([
                p.series_ids()[e.series].clone(),
                e.tau.to_string(),
                p.dates()[e.tau - 1].to_string(),
                e.kind.name().to_string(),
                format!("{:?}", e.delta),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<truth writer>", e))?;
        Ok(())
    }
}

/// Add the listed outliers to specific series.
pub fn inject_at(
    p: &Panel,
    placements: &[(usize, OutlierSpec)],
    units: MagnitudeUnits,
) -> Result<(Panel, GroundTruth)> {
    let n = p.n();
    let mut values = p.values().to_vec();
    let mut truth = GroundTruth::default();
    let mut seen = std::collections::HashSet::new();
    let sd: Vec<f64> = (0..p.d())
        .map(|i| crate::stats::std_dev(p.series(i)))
        .collect();
    for (i, spec) in placements {
        let i = *i;
        if i >= p.d() {
            return Err(Error::InvalidConfig(format!("series {i} out of range")));
        }
        if !seen.insert((i, spec.tau)) {
            return Err(Error::InvalidConfig(format!(
                "duplicate outlier at series {i}, tau {}",
                spec.tau
            )));
        }
        let sig = signature(&spec.kind, n, spec.tau)?;
        let delta = match units {
            MagnitudeUnits::SampleStd => spec.delta * sd[i],
            MagnitudeUnits::Absolute => spec.delta,
        };
        for (v, s) in values[i * n..(i + 1) * n].iter_mut().zip(&sig) {
            *v += delta * s;
        }
        truth.entries.push(TruthEntry {
            series: i,
            tau: spec.tau,
            kind: spec.kind.clone(),
            delta,
        });
    }
    Ok((p.with_values(values, p.layout())?, truth))
}

/// Contaminate the first `ceil(fraction * d)` series with every spec.
pub fn inject_outliers(
    p: &Panel,
    specs: &[OutlierSpec],
    fraction: f64,
    units: MagnitudeUnits,
) -> Result<(Panel, GroundTruth)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    let count = contaminated_count(p.d(), fraction);
    let placements: Vec<(usize, OutlierSpec)> = (0..count)
        .flat_map(|i| specs.iter().map(move |s| (i, s.clone())))
        .collect();
    inject_at(p, &placements, units)
}

pub fn contaminated_count(d: usize, fraction: f64) -> usize {
    // Guard against 0.4 * 600 = 240.00000000000003 style round-up.
    let raw = fraction * d as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_panel_is_zero() {
        let p = simulate_dgp(&DgpParams::noise_free(), 3, 50).unwrap();
        assert!(p.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let params = DgpParams {
            seed: 11,
            ..Default::default()
        };
        let a = simulate_dgp(&params, 4, 60).unwrap();
        let b = simulate_dgp(&params, 4, 60).unwrap();
        assert_eq!(a, b);
        let c = simulate_dgp(&DgpParams { seed: 12, ..params }, 4, 60).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_control_points() {
        let params = DgpParams {
            control_points: [0.0, 15.0, 14.0, 30.0],
            ..Default::default()
        };
        assert!(simulate_dgp(&params, 1, 10).is_err());
    }

    #[test]
    fn monthly_cubic_hits_control_points_and_repeats() {
        let s = MonthlyCubic::new([0.0, 14.0, 15.0, 30.0], [2.0, 2.0, -1.0, -1.0]);
        assert!((s.eval(0.0) - 2.0).abs() < 1e-12);
        assert!((s.eval(14.0) - 2.0).abs() < 1e-12);
        assert!((s.eval(15.0) + 1.0).abs() < 1e-12);
        assert!((s.eval(29.999_999) + 1.0).abs() < 1e-5);
        for t in 1..40 {
            let t = t as f64;
            assert!((s.eval(t) - s.eval(t + 30.0)).abs() < 1e-12);
        }
        // continuity at interior knots
        for k in [14.0, 15.0] {
            assert!((s.eval(k - 1e-9) - s.eval(k)).abs() < 1e-6);
        }
    }

    #[test]
    fn ao_with_unit_scale() {
        let p = Panel::from_rows(&[vec![0.0; 100]], Day(0), Layout::Raw).unwrap();
        let (q, truth) = inject_outliers(
            &p,
            &[OutlierSpec::new(OutlierKind::Ao, 80, 1.5)],
            1.0,
            MagnitudeUnits::Absolute,
        )
        .unwrap();
        let nonzero: Vec<(usize, f64)> = q
            .series(0)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(t, v)| (t, *v))
            .collect();
        assert_eq!(nonzero, vec![(79, 1.5)]);
        assert_eq!(truth.entries.len(), 1);
    }

    #[test]
    fn zero_delta_keeps_panel() {
        let p = simulate_dgp(&DgpParams::default(), 5, 40).unwrap();
        let (q, truth) = inject_outliers(
            &p,
            &[OutlierSpec::new(OutlierKind::Lso, 10, 0.0)],
            0.4,
            MagnitudeUnits::SampleStd,
        )
        .unwrap();
        assert_eq!(p, q);
        assert_eq!(truth.entries.len(), 2);
        assert!(truth.entries.iter().all(|e| e.delta == 0.0));
    }

    #[test]
    fn tau_out_of_range() {
        let p = Panel::from_rows(&[vec![0.0; 10]], Day(0), Layout::Raw).unwrap();
        let spec = OutlierSpec::new(OutlierKind::Ao, 11, 1.0);
        assert!(inject_outliers(&p, &[spec], 1.0, MagnitudeUnits::Absolute).is_err());
        let spec = OutlierSpec::new(OutlierKind::Ao, 0, 1.0);
        assert!(inject_outliers(&p, &[spec], 1.0, MagnitudeUnits::Absolute).is_err());
    }

    #[test]
    fn contaminated_prefix() {
        assert_eq!(contaminated_count(600, 0.4), 240);
        assert_eq!(contaminated_count(5, 0.5), 3);
        assert_eq!(contaminated_count(5, 0.0), 0);
    }

    #[test]
    fn decaying_requires_decreasing_weights() {
        assert!(signature(&OutlierKind::Decaying(vec![0.5, 0.7]), 20, 3).is_err());
        assert!(signature(&OutlierKind::Decaying(vec![1.2]), 20, 3).is_err());
        let s = signature(&OutlierKind::Decaying(vec![0.5]), 20, 3).unwrap();
        assert_eq!(s[2], 1.0);
        assert_eq!(s[3], 0.5);
        assert_eq!(s[4], 0.25);
    }
}
