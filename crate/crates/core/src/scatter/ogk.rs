//! Orthogonalized Gnanadesikan-Kettenring scatter with tau-scales.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::univariate::tau_location_scale_buf;
use super::{col, column_tau_scales, conjugate_diag, panel_matrix, standardize, Diagnostics, ScatterEstimate, ScatterMethod};
use crate::error::Result;
use crate::linalg::{reconstruct, sym_eigen};
use crate::panel::Panel;

/// Pairwise matrix `u_jk = (s^2(z_j + z_k) - s^2(z_j - z_k)) / 4`.
pub(crate) fn pairwise_u(z: &DMatrix<f64>) -> DMatrix<f64> {
    let d = z.ncols();
    let n = z.nrows();
    let rows: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], vec![0.0; n], Vec::with_capacity(n)),
            |(sum, diff, buf), j| {
                let zj = col(z, j);
                let mut out = vec![0.0; d - j];
                out[0] = tau_location_scale_buf(zj, buf).1.powi(2);
                for k in (j + 1)..d {
                    let zk = col(z, k);
                    for t in 0..n {
                        sum[t] = zj[t] + zk[t];
                        diff[t] = zj[t] - zk[t];
                    }
                    let sp = tau_location_scale_buf(sum, buf).1;
                    let sm = tau_location_scale_buf(diff, buf).1;
                    out[k - j] = 0.25 * (sp * sp - sm * sm);
                }
                out
            },
        )
        .collect();
    let mut u = DMatrix::zeros(d, d);
    for (j, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            u[(j, j + off)] = v;
            u[(j + off, j)] = v;
        }
    }
    u
}

/// Eigenvectors of the pairwise matrix and the squared tau-scales of the
/// projections, for already standardized data.
pub(crate) fn ogk_core(z: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let u = pairwise_u(z);
    let e = sym_eigen(&u).vectors;
    let v = z * &e;
    let lambda: Vec<f64> = (0..v.ncols())
        .into_par_iter()
        .map_init(Vec::new, |buf, j| tau_location_scale_buf(col(&v, j), buf).1.powi(2))
        .collect();
    (e, lambda)
}

pub fn ogk_scatter(p: &Panel) -> Result<ScatterEstimate> {
    let r = panel_matrix(p);
    let scales = column_tau_scales(&r, Some(p.series_ids()))?;
    let z = standardize(&r, &scales);
    let (e, lambda) = ogk_core(&z);
    let sigma_z = reconstruct(&e, &lambda);
    Ok(ScatterEstimate {
        method: ScatterMethod::Ogk,
        sigma: crate::linalg::symmetrize(conjugate_diag(&sigma_z, &scales)),
        scales,
        diagnostics: Diagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::scatter::tau_scale;

    #[test]
    fn scalar_case_is_squared_tau() {
        let l = DMatrix::from_element(1, 1, 2.0);
        let p = gaussian_panel(&l, 400, 1);
        let est = ogk_scatter(&p).unwrap();
        let t = tau_scale(p.series(0));
        assert!((est.sigma[(0, 0)] - t * t).abs() < 1e-10 * t * t);
    }

    #[test]
    fn recovers_gaussian_covariance() {
        let l = DMatrix::from_row_slice(
            5,
            5,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.8, 0.6, 0.0, 0.0, 0.0, //
                0.0, 0.5, 2.0, 0.0, 0.0, //
                -0.3, 0.0, 0.4, 0.7, 0.0, //
                0.2, 0.2, 0.2, 0.2, 3.0,
            ],
        );
        let truth = &l * l.transpose();
        let p = gaussian_panel(&l, 5000, 2);
        let est = ogk_scatter(&p).unwrap();
        let rel = (&est.sigma - &truth).norm() / truth.norm();
        assert!(rel < 0.1, "relative error {rel}");
        assert_symmetric_psd(&est.sigma);
    }

    #[test]
    fn unit_diagonal_of_pairwise_matrix() {
        let l = DMatrix::identity(4, 4);
        let p = gaussian_panel(&l, 300, 3);
        let r = panel_matrix(&p);
        let s = column_tau_scales(&r, None).unwrap();
        let u = pairwise_u(&standardize(&r, &s));
        for j in 0..4 {
            assert!((u[(j, j)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_rescale_conjugates() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.1, -0.4, 1.0]);
        let p = gaussian_panel(&l, 200, 4);
        let f = [2.0, 0.25, 8.0];
        let a = ogk_scatter(&p).unwrap();
        let b = ogk_scatter(&rescale(&p, &f)).unwrap();
        assert_eq!(b.sigma, conjugate_diag(&a.sigma, &f));
    }

    #[test]
    fn zero_scale_is_reported() {
        let p = Panel::from_rows(&[vec![1.0; 20], (0..20).map(|t| t as f64).collect()], crate::panel::Day(0), crate::panel::Layout::Residual).unwrap();
        assert!(matches!(ogk_scatter(&p), Err(crate::Error::Degenerate(_))));
    }
}
