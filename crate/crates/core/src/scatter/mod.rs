//! Robust scatter estimators for residual panels.
//!
//! Panels are viewed as `n x d` matrices: rows are days, columns are series.

mod com;
mod feau;
mod mrcd;
mod ogk;
mod univariate;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Panel;

pub use com::{com_scatter, ComConfig};
pub use feau::{feau_estimate, Feature, FeauEstimate};
pub use mrcd::{mrcd_scatter, AlphaConvention, InitialEstimate, MrcdCandidate, MrcdConfig};
pub use ogk::ogk_scatter;
pub use univariate::{comedian, tau_location_scale, tau_scale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScatterMethod {
    Ogk,
    Mrcd,
    Com,
    Feau,
}

impl ScatterMethod {
    pub fn name(self) -> &'static str {
        match self {
            ScatterMethod::Ogk => "ogk",
            ScatterMethod::Mrcd => "mrcd",
            ScatterMethod::Com => "com",
            ScatterMethod::Feau => "feau",
        }
    }
}

impl fmt::Display for ScatterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScatterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ogk" => Ok(ScatterMethod::Ogk),
            "mrcd" => Ok(ScatterMethod::Mrcd),
            "com" => Ok(ScatterMethod::Com),
            "feau" => Ok(ScatterMethod::Feau),
            other => Err(Error::InvalidConfig(format!("unknown scatter method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Regularization weight on the target (MRCD).
    pub rho: Option<f64>,
    /// Passes performed (COM).
    pub iterations: Option<usize>,
    /// Winning h-subset, 0-based row indices (MRCD).
    pub subset: Option<Vec<usize>>,
    pub candidates: Vec<MrcdCandidate>,
    /// Series excluded because their scale was zero.
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterEstimate {
    pub method: ScatterMethod,
    pub sigma: DMatrix<f64>,
    /// Per-variable scales used for standardization.
    pub scales: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl ScatterEstimate {
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.sigma.diagonal().iter().copied().collect()
    }

    /// Write the dense matrix as headerless CSV.
    pub fn write_sigma<W: std::io::Write>(&self, writer: W) -> Result<()> {
        write_matrix(&self.sigma, writer)
    }

    /// Write `series_id,variance,scale`.
    pub fn write_diag<W: std::io::Write>(&self, ids: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["series_id", "variance", "scale"])?;
        for (i, id) in ids.iter().enumerate() {
            w.write_record([
                id.clone(),
                format!("{:?}", self.sigma[(i, i)]),
                format!("{:?}", self.scales[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<diag writer>", e))?;
        Ok(())
    }
}

pub fn write_matrix<W: std::io::Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io("<matrix writer>", e))?;
    Ok(())
}

pub fn read_matrix<R: std::io::Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("matrix entry {s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let d = rows.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// Read variances from a `series_id,variance[,...]` CSV.
pub fn read_diag<R: std::io::Read>(reader: R) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse("diag rows need series_id,variance".into()));
        }
        let v = rec[1]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("variance {:?}: {e}", &rec[1])))?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

/// Run the named estimator on a residual panel (FEAU is not a scatter of
/// the series and is served by [`feau_estimate`]).
pub fn estimate(p: &Panel, method: ScatterMethod, mrcd: &MrcdConfig, com: &ComConfig) -> Result<ScatterEstimate> {
    match method {
        ScatterMethod::Ogk => ogk_scatter(p),
        ScatterMethod::Mrcd => mrcd_scatter(p, mrcd),
        ScatterMethod::Com => com_scatter(p, com),
        ScatterMethod::Feau => Err(Error::InvalidConfig(
            "feau works on features of the raw panel; use feau_estimate".into(),
        )),
    }
}

/// `n x d` matrix view of a panel (columns are series).
pub(crate) fn panel_matrix(p: &Panel) -> DMatrix<f64> {
    DMatrix::from_column_slice(p.n(), p.d(), p.values())
}

pub(crate) fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

/// Tau-scales of every column; errors on zero scale.
pub(crate) fn column_tau_scales(m: &DMatrix<f64>, ids: Option<&[String]>) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let scales: Vec<f64> = (0..m.ncols())
        .into_par_iter()
        .map_init(Vec::new, |buf, j| univariate::tau_location_scale_buf(col(m, j), buf).1)
        .collect();
    let zero: Vec<String> = scales
        .iter()
        .enumerate()
        .filter(|(_, s)| !(**s > 0.0))
        .map(|(j, _)| ids.map_or_else(|| j.to_string(), |ids| ids[j].clone()))
        .collect();
    if !zero.is_empty() {
        return Err(Error::Degenerate(format!(
            "zero scale for {} series: {}",
            zero.len(),
            zero.iter().take(10).cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(scales)
}

/// Divide column `j` by `scales[j]`.
pub(crate) fn standardize(m: &DMatrix<f64>, scales: &[f64]) -> DMatrix<f64> {
    let mut z = m.clone();
    for (j, s) in scales.iter().enumerate() {
        z.column_mut(j).scale_mut(1.0 / s);
    }
    z
}

/// `diag(s) m diag(s)`.
pub(crate) fn conjugate_diag(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (s[i] * s[j]) * m[(i, j)])
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::panel::{Day, Layout};
    use crate::seed;
    use rand_distr::{Distribution, StandardNormal};

    /// Gaussian panel with covariance `l l'`.
    pub fn gaussian_panel(l: &DMatrix<f64>, n: usize, s: u64) -> Panel {
        let d = l.nrows();
        let mut rng = seed::rng(s, &[]);
        let mut rows = vec![vec![0.0; n]; d];
        for t in 0..n {
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..d {
                rows[i][t] = (0..d).map(|k| l[(i, k)] * e[k]).sum();
            }
        }
        Panel::from_rows(&rows, Day(0), Layout::Residual).unwrap()
    }

    pub fn rescale(p: &Panel, factors: &[f64]) -> Panel {
        let rows: Vec<Vec<f64>> = (0..p.d())
            .map(|i| p.series(i).iter().map(|v| v * factors[i]).collect())
            .collect();
        Panel::from_rows(&rows, Day(0), Layout::Residual).unwrap()
    }

    pub fn assert_symmetric_psd(m: &DMatrix<f64>) {
        let inf = m.abs().max();
        assert!((m - m.transpose()).abs().max() <= 1e-10 * inf);
        let eig = crate::linalg::sym_eigen(m);
        let d = m.nrows() as f64;
        let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8 * m.trace() / d, "min eigenvalue {min}");
    }
}
