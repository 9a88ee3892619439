//! Deterministic trend plus harmonic cycle, fitted per series with the least
//! trimmed estimator (random elemental starts, one concentration refit each).

use std::f64::consts::PI;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::panel::{Layout, Panel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCycleSpec {
    /// Polynomial trend order `v` (columns `t^0 .. t^v`).
    pub trend_order: usize,
    /// Harmonic frequencies in radians per day.
    pub frequencies: Vec<f64>,
}

impl Default for TrendCycleSpec {
    /// Quadratic trend with weekly and monthly harmonics.
    fn default() -> Self {
        TrendCycleSpec {
            trend_order: 2,
            frequencies: vec![2.0 * PI / 7.0, 2.0 * PI / 30.0],
        }
    }
}

impl TrendCycleSpec {
    pub fn new(trend_order: usize, harmonics: usize) -> TrendCycleSpec {
        let defaults = [2.0 * PI / 7.0, 2.0 * PI / 30.0];
        let frequencies = (0..harmonics)
            .map(|j| defaults.get(j).copied().unwrap_or(2.0 * PI / (7.0 * (j + 1) as f64)))
            .collect();
        TrendCycleSpec {
            trend_order,
            frequencies,
        }
    }

    pub fn harmonics(&self) -> usize {
        self.frequencies.len()
    }

    pub fn width(&self) -> usize {
        1 + self.trend_order + 2 * self.harmonics()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self
            .frequencies
            .iter()
            .find(|f| !(**f > 0.0 && **f <= PI))
        {
            return Err(Error::InvalidConfig(format!(
                "frequency {f} outside (0, pi]"
            )));
        }
        Ok(())
    }

    /// Design row for (1-based) time `t`.
    pub fn row(&self, t: f64, out: &mut Vec<f64>) {
        out.clear();
        let mut pow = 1.0;
        for _ in 0..=self.trend_order {
            out.push(pow);
            pow *= t;
        }
        for &lambda in &self.frequencies {
            out.push((lambda * t).cos());
            out.push((lambda * t).sin());
        }
    }
}

/// Row-major regression design.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Design {
    pub fn from_rows(rows: &[Vec<f64>]) -> Design {
        let p = rows.first().map_or(0, |r| r.len());
        Design {
            n: rows.len(),
            p,
            data: rows.concat(),
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.p..(t + 1) * self.p]
    }

    /// Append a column.
    pub fn with_column(&self, col: &[f64]) -> Design {
        assert_eq!(col.len(), self.n);
        let p = self.p + 1;
        let mut data = Vec::with_capacity(self.n * p);
        for t in 0..self.n {
            data.extend_from_slice(self.row(t));
            data.push(col[t]);
        }
        Design { n: self.n, p, data }
    }

    pub fn predict(&self, beta: &[f64], t: usize) -> f64 {
        self.row(t).iter().zip(beta).map(|(x, b)| x * b).sum()
    }

    fn residuals_into(&self, y: &[f64], beta: &[f64], out: &mut [f64]) {
        for t in 0..self.n {
            out[t] = y[t] - self.predict(beta, t);
        }
    }
}

/// Trend-plus-cycle design for `t = 1..n`.
pub fn build_design(n: usize, spec: &TrendCycleSpec) -> Result<Design> {
    spec.validate()?;
    let p = spec.width();
    if n < p {
        return Err(Error::InsufficientData(format!(
            "n = {n} is smaller than the design width {p}"
        )));
    }
    let mut data = Vec::with_capacity(n * p);
    let mut row = Vec::with_capacity(p);
    for t in 1..=n {
        spec.row(t as f64, &mut row);
        data.extend_from_slice(&row);
    }
    Ok(Design { n, p, data })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LteConfig {
    /// Trimming fraction used when `h` is not given: `h = floor(h_frac * n)`.
    pub h_frac: f64,
    pub h: Option<usize>,
    pub n_subsets: usize,
    /// Concentration refits per elemental start (1 = the plain algorithm).
    pub csteps: usize,
    pub seed: u64,
}

impl Default for LteConfig {
    fn default() -> Self {
        LteConfig {
            h_frac: 0.75,
            h: None,
            n_subsets: 500,
            csteps: 1,
            seed: 0,
        }
    }
}

impl LteConfig {
    pub fn trim_count(&self, n: usize) -> usize {
        self.h
            .unwrap_or_else(|| (self.h_frac * n as f64 + 1e-9).floor() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub h: usize,
    /// Sum of the `h` smallest squared residuals of the returned fit.
    pub objective: f64,
    /// Elemental subsets evaluated (singular draws excluded).
    pub subsets_used: usize,
    /// Objective after each accepted improvement, in order.
    pub objective_path: Vec<f64>,
}

/// Indices of the `h` smallest squared residuals; ties broken by index.
/// Returned in ascending index order.
fn smallest_h(resid: &[f64], h: usize, keys: &mut Vec<(f64, u32)>) -> Vec<usize> {
    keys.clear();
    keys.extend(resid.iter().enumerate().map(|(i, r)| (r * r, i as u32)));
    if h < keys.len() {
        keys.select_nth_unstable_by(h, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    let mut idx: Vec<usize> = keys[..h].iter().map(|k| k.1 as usize).collect();
    idx.sort_unstable();
    idx
}

fn trimmed_sum(resid: &[f64], h: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(resid.iter().map(|r| r * r));
    if h < buf.len() {
        buf.select_nth_unstable_by(h, |a, b| a.total_cmp(b));
    }
    buf[..h].iter().sum()
}

fn subset_fit(design: &Design, y: &[f64], idx: &[usize], xbuf: &mut Vec<f64>, ybuf: &mut Vec<f64>) -> Option<Vec<f64>> {
    xbuf.clear();
    ybuf.clear();
    for &t in idx {
        xbuf.extend_from_slice(design.row(t));
        ybuf.push(y[t]);
    }
    lstsq(xbuf, ybuf, design.p)
}

/// Least trimmed estimator: for each random elemental subset, fit it exactly,
/// keep the `h` best-fitting observations, refit by OLS on them and accept if
/// the trimmed sum of squares improves.
pub fn lte_fit(y: &[f64], design: &Design, cfg: &LteConfig) -> Result<RobustFit> {
    let n = y.len();
    let p = design.p;
    if design.n != n {
        return Err(Error::DimensionMismatch {
            expected: design.n,
            got: n,
        });
    }
    let h = cfg.trim_count(n);
    if h < p || h > n {
        return Err(Error::InvalidConfig(format!(
            "trim count h = {h} must lie in [{p}, {n}]"
        )));
    }
    if cfg.n_subsets == 0 || cfg.csteps == 0 {
        return Err(Error::InvalidConfig("n_subsets and csteps must be >= 1".into()));
    }
    let mut rng = seed::rng(cfg.seed, &[seed::label("lte")]);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut path = Vec::new();
    let mut resid = vec![0.0; n];
    let (mut keys, mut sq) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut xbuf, mut ybuf) = (Vec::new(), Vec::new());
    let (mut used, mut attempts) = (0usize, 0usize);
    let max_attempts = 10 * cfg.n_subsets;
    while used < cfg.n_subsets && attempts < max_attempts {
        attempts += 1;
        let mut elemental: Vec<usize> = sample(&mut rng, n, p).into_vec();
        elemental.sort_unstable();
        let Some(mut beta) = subset_fit(design, y, &elemental, &mut xbuf, &mut ybuf) else {
            continue;
        };
        used += 1;
        for _ in 0..cfg.csteps {
            design.residuals_into(y, &beta, &mut resid);
            let subset = smallest_h(&resid, h, &mut keys);
            match subset_fit(design, y, &subset, &mut xbuf, &mut ybuf) {
                Some(b) => beta = b,
                None => break,
            }
        }
        design.residuals_into(y, &beta, &mut resid);
        let ss = trimmed_sum(&resid, h, &mut sq);
        if best.as_ref().map_or(true, |(_, s)| ss < *s) {
            path.push(ss);
            best = Some((beta, ss));
        }
    }
    let (coefficients, objective) = best.ok_or_else(|| {
        Error::Singular(format!(
            "no non-singular elemental subset in {attempts} draws"
        ))
    })?;
    design.residuals_into(y, &coefficients, &mut resid);
    Ok(RobustFit {
        coefficients,
        residuals: resid,
        h,
        objective,
        subsets_used: used,
        objective_path: path,
    })
}

/// Per-series fits of a raw panel.
#[derive(Debug)]
pub struct PanelFit {
    /// Residual panel (failed series dropped).
    pub residuals: Panel,
    /// Fits aligned with the rows of `residuals`.
    pub fits: Vec<RobustFit>,
    /// Original row index of each kept series.
    pub kept: Vec<usize>,
    pub failures: Vec<(String, Error)>,
}

/// Fit every series independently. Series seeds are derived from the series
/// position, so results do not depend on scheduling.
pub fn fit_panel(p: &Panel, spec: &TrendCycleSpec, cfg: &LteConfig) -> Result<PanelFit> {
    let design = build_design(p.n(), spec)?;
    let results: Vec<Result<RobustFit>> = (0..p.d())
        .into_par_iter()
        .map(|i| {
            let series_cfg = LteConfig {
                seed: seed::derive(cfg.seed, &[seed::label("series"), i as u64]),
                ..cfg.clone()
            };
            lte_fit(p.series(i), &design, &series_cfg)
        })
        .collect();
    let mut fits = Vec::with_capacity(p.d());
    let mut kept = Vec::with_capacity(p.d());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => {
                kept.push(i);
                fits.push(f);
            }
            Err(e) => {
                log::warn!("lte fit failed for {}: {e}", p.series_ids()[i]);
                failures.push((p.series_ids()[i].clone(), e));
            }
        }
    }
    if fits.is_empty() {
        return Err(Error::Numerical("every series failed to fit".into()));
    }
    let ids = kept.iter().map(|&i| p.series_ids()[i].clone()).collect();
    let values = fits.iter().flat_map(|f| f.residuals.iter().copied()).collect();
    let residuals = Panel::new(ids, p.dates().to_vec(), values, Layout::Residual)?;
    Ok(PanelFit {
        residuals,
        fits,
        kept,
        failures,
    })
}

/// Write coefficients as CSV `series_id,b0,b1,...`.
pub fn write_coefficients<W: std::io::Write>(
    ids: &[String],
    fits: &[RobustFit],
    spec: &TrendCycleSpec,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string()];
    header.extend((0..=spec.trend_order).map(|j| format!("trend_{j}")));
    for j in 1..=spec.harmonics() {
        header.push(format!("cos_{j}"));
        header.push(format!("sin_{j}"));
    }
    header.push("objective".into());
    w.write_record(&header)?;
    for (id, f) in ids.iter().zip(fits) {
        let mut rec = vec![id.clone()];
        rec.extend(f.coefficients.iter().map(|c| format!("{c:?}")));
        rec.push(format!("{:?}", f.objective));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<coefficient writer>", e))?;
    Ok(())
}

/// Read coefficients written by [`write_coefficients`].
pub fn read_coefficients<R: std::io::Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec[0].to_string();
        let vals = rec
            .iter()
            .skip(1)
            .take(rec.len().saturating_sub(2))
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("coefficient {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((id, vals));
    }
    Ok(out)
}
