//! Small dense linear-algebra kernels.
//!
//! Least squares goes through Householder QR on a row-major buffer; the
//! polynomial trend columns (1, t, t^2) are badly scaled and normal equations
//! lose too many digits for the exact-interpolation checks.

use nalgebra::{DMatrix, DVector};

/// Least-squares solution of `x * beta = y` for a row-major `rows x p` matrix.
///
/// Returns `None` when the matrix is numerically rank deficient.
pub fn lstsq(x: &[f64], y: &[f64], p: usize) -> Option<Vec<f64>> {
    let rows = y.len();
    debug_assert_eq!(x.len(), rows * p);
    if rows < p || p == 0 {
        return None;
    }
    // Column-major working copy, columns scaled to unit max-norm.
    let mut a = vec![0.0; rows * p];
    let mut scale = vec![0.0f64; p];
    for r in 0..rows {
        for c in 0..p {
            let v = x[r * p + c];
            a[c * rows + r] = v;
            scale[c] = scale[c].max(v.abs());
        }
    }
    for c in 0..p {
        if scale[c] == 0.0 {
            return None;
        }
        let inv = 1.0 / scale[c];
        a[c * rows..(c + 1) * rows].iter_mut().for_each(|v| *v *= inv);
    }
    let mut b = y.to_vec();
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let col = &mut a[k * rows..(k + 1) * rows];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        col[k] -= alpha;
        let vnorm2 = col[k..].iter().map(|v| v * v).sum::<f64>();
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        let v: Vec<f64> = col[k..].to_vec();
        for j in (k + 1)..p {
            let cj = &mut a[j * rows..(j + 1) * rows];
            let dot: f64 = v.iter().zip(&cj[k..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            cj[k..].iter_mut().zip(&v).for_each(|(c, vv)| *c -= f * vv);
        }
        let dot: f64 = v.iter().zip(&b[k..]).map(|(a, b)| a * b).sum();
        let f = 2.0 * dot / vnorm2;
        b[k..].iter_mut().zip(&v).for_each(|(c, vv)| *c -= f * vv);
    }
    let max_diag = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if diag.iter().any(|d| d.abs() <= max_diag * 1e-11) {
        return None;
    }
    // Back substitution on R (upper triangle stored above the diagonal).
    let mut beta = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in (k + 1)..p {
            s -= a[j * rows + k] * beta[j];
        }
        beta[k] = s / diag[k];
    }
    for c in 0..p {
        beta[c] /= scale[c];
    }
    Some(beta)
}

/// Eigendecomposition of a symmetric matrix with a reproducible basis:
/// eigenvalues descending, each eigenvector signed so that its
/// largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() + 1e-14 {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    SymEigen { values, vectors }
}

/// `v diag(lambda) v'`.
pub fn reconstruct(vectors: &DMatrix<f64>, lambda: &[f64]) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, l) in lambda.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*l);
    }
    let out = scaled * vectors.transpose();
    symmetrize(out)
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Log-determinant through Cholesky; `None` if the matrix is not PD.
pub fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum())
}

/// Moore-Penrose inverse of a symmetric PSD matrix and its numerical rank.
pub fn pinv_sym(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = sym_eigen(m);
    let top = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = top * 1e-12 * m.nrows().max(1) as f64;
    let inv: Vec<f64> = eig
        .values
        .iter()
        .map(|&v| if v > tol { 1.0 / v } else { 0.0 })
        .collect();
    let rank = inv.iter().filter(|v| **v != 0.0).count();
    (reconstruct(&eig.vectors, &inv), rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_exact_line() {
        let x: Vec<f64> = (1..=5).flat_map(|t| [1.0, t as f64]).collect();
        let y: Vec<f64> = (1..=5).map(|t| 2.0 + 3.0 * t as f64).collect();
        let b = lstsq(&x, &y, 2).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_detects_rank_deficiency() {
        let x = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(lstsq(&x, &[1.0, 2.0, 3.0], 2).is_none());
    }

    #[test]
    fn lstsq_badly_scaled_quadratic() {
        let n = 730;
        let x: Vec<f64> = (1..=n)
            .flat_map(|t| {
                let t = t as f64;
                [1.0, t, t * t]
            })
            .collect();
        let y: Vec<f64> = (1..=n)
            .map(|t| {
                let t = t as f64;
                5.0 - 0.25 * t + 1e-3 * t * t
            })
            .collect();
        let b = lstsq(&x, &y, 3).unwrap();
        assert!((b[0] - 5.0).abs() < 1e-8);
        assert!((b[1] + 0.25).abs() < 1e-10);
        assert!((b[2] - 1e-3).abs() < 1e-13);
    }

    #[test]
    fn eigen_is_sorted_and_signed() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]);
        let e = sym_eigen(&m);
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        for j in 0..3 {
            let col = e.vectors.column(j);
            let top = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let first = col.iter().find(|v| v.abs() > top - 1e-14).unwrap();
            assert!(*first > 0.0);
        }
        let back = reconstruct(&e.vectors, e.values.as_slice());
        assert!((back - m).abs().max() < 1e-12);
    }
}
