//! Comedian-based scatter.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::univariate::comedian_centered;
use super::{col, panel_matrix, Diagnostics, ScatterEstimate, ScatterMethod};
use crate::error::{Error, Result};
use crate::linalg::{reconstruct, sym_eigen};
use crate::panel::Panel;
use crate::stats::mad_in_place;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ComConfig {
    /// Number of eigen/MAD passes (the first pass plus refinements).
    pub max_iter: usize,
}

impl Default for ComConfig {
    fn default() -> Self {
        ComConfig { max_iter: 2 }
    }
}

fn comedian_matrix(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let d = centered.ncols();
    let n = centered.nrows();
    let rows: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, j| {
                let xj = col(centered, j);
                (j..d).map(|k| comedian_centered(xj, col(centered, k), buf)).collect()
            },
        )
        .collect();
    let mut c = DMatrix::zeros(d, d);
    for (j, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            c[(j, j + off)] = v;
            c[(j + off, j)] = v;
        }
    }
    c
}

fn column_mads(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
    (0..m.ncols())
        .into_par_iter()
        .map_init(Vec::new, |buf: &mut Vec<f64>, j| {
            buf.clear();
            buf.extend_from_slice(col(m, j));
            mad_in_place(buf)
        })
        .collect()
}

/// COM scatter. Series with zero MAD are excluded from the estimate and get
/// an identity row/column in the output.
pub fn com_scatter(p: &Panel, cfg: &ComConfig) -> Result<ScatterEstimate> {
    if cfg.max_iter == 0 {
        return Err(Error::InvalidConfig("com max_iter must be >= 1".into()));
    }
    let full = panel_matrix(p);
    let stats = column_mads(&full);
    let (active, degenerate): (Vec<usize>, Vec<usize>) =
        (0..p.d()).partition(|&j| stats[j].1 > 0.0 && stats[j].1.is_finite());
    if active.is_empty() {
        return Err(Error::Degenerate("every series has zero MAD".into()));
    }
    if !degenerate.is_empty() {
        log::warn!("com: {} series with zero MAD excluded", degenerate.len());
    }
    let n = p.n();
    let mut centered = DMatrix::zeros(n, active.len());
    let mut r = DMatrix::zeros(n, active.len());
    for (a, &j) in active.iter().enumerate() {
        let med = stats[j].0;
        for (t, v) in col(&full, j).iter().enumerate() {
            centered[(t, a)] = v - med;
            r[(t, a)] = *v;
        }
    }
    let mad: Vec<f64> = active.iter().map(|&j| stats[j].1).collect();
    let dinv: Vec<f64> = mad.iter().map(|m| 1.0 / m).collect();

    let com = comedian_matrix(&centered);
    let mut delta = super::conjugate_diag(&com, &dinv);
    let mut sigma = DMatrix::zeros(0, 0);
    for _ in 0..cfg.max_iter {
        let e = sym_eigen(&delta).vectors;
        // Z = R D E, so each z_i is a projection of the standardized data.
        let z = super::standardize(&r, &mad) * &e;
        let gamma: Vec<f64> = column_mads(&z).into_iter().map(|(_, m)| m * m).collect();
        let std_sigma = reconstruct(&e, &gamma);
        sigma = super::conjugate_diag(&std_sigma, &mad);
        delta = std_sigma;
    }

    let d = p.d();
    let mut out = DMatrix::identity(d, d);
    let mut scales = vec![0.0; d];
    for (a, &j) in active.iter().enumerate() {
        scales[j] = mad[a];
        for (b, &k) in active.iter().enumerate() {
            out[(j, k)] = sigma[(a, b)];
        }
    }
    Ok(ScatterEstimate {
        method: ScatterMethod::Com,
        sigma: crate::linalg::symmetrize(out),
        scales,
        diagnostics: Diagnostics {
            iterations: Some(cfg.max_iter),
            degenerate,
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::panel::{Day, Layout};
    use crate::stats::mad;

    #[test]
    fn scalar_case_is_squared_mad() {
        let p = gaussian_panel(&DMatrix::from_element(1, 1, 1.5), 301, 1);
        let est = com_scatter(&p, &ComConfig { max_iter: 1 }).unwrap();
        let m = mad(p.series(0));
        assert!((est.sigma[(0, 0)] - m * m).abs() < 1e-12 * m * m);
    }

    #[test]
    fn correlation_of_bivariate_normal() {
        let rho: f64 = 0.9;
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, rho, (1.0 - rho * rho).sqrt()]);
        let p = gaussian_panel(&l, 100_000, 2);
        let s = com_scatter(&p, &ComConfig::default()).unwrap().sigma;
        let corr = s[(0, 1)] / (s[(0, 0)] * s[(1, 1)]).sqrt();
        assert!((corr - rho).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn iteration_is_stable() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.8]);
        let p = gaussian_panel(&l, 2000, 3);
        let one = com_scatter(&p, &ComConfig { max_iter: 1 }).unwrap().sigma;
        let two = com_scatter(&p, &ComConfig { max_iter: 2 }).unwrap().sigma;
        assert!((&two - &one).norm() / one.norm() < 0.05);
    }

    #[test]
    fn diagonal_rescale_conjugates() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.1, -0.4, 1.0]);
        let p = gaussian_panel(&l, 201, 4);
        let f = [0.5, 4.0, 2.0];
        let a = com_scatter(&p, &ComConfig::default()).unwrap();
        let b = com_scatter(&rescale(&p, &f), &ComConfig::default()).unwrap();
        assert_eq!(b.sigma, super::super::conjugate_diag(&a.sigma, &f));
        assert_symmetric_psd(&a.sigma);
    }

    #[test]
    fn zero_mad_series_is_padded() {
        let mut rows = vec![vec![0.0; 50]];
        rows.push((0..50).map(|t| ((t * 37) % 11) as f64).collect());
        rows.push((0..50).map(|t| ((t * 17) % 7) as f64 - 3.0).collect());
        let p = Panel::from_rows(&rows, Day(0), Layout::Residual).unwrap();
        let est = com_scatter(&p, &ComConfig::default()).unwrap();
        assert_eq!(est.diagnostics.degenerate, vec![0]);
        assert_eq!(est.sigma[(0, 0)], 1.0);
        assert_eq!(est.sigma[(0, 1)], 0.0);
        assert!(est.sigma[(1, 1)] > 0.0);
    }
}
