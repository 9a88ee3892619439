//! Minimum regularized covariance determinant with an identity target.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::ogk::ogk_core;
use super::univariate::tau_location_scale_buf;
use super::{col, column_tau_scales, conjugate_diag, panel_matrix, standardize, Diagnostics, ScatterEstimate, ScatterMethod};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::panel::Panel;
use crate::stats::ranks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaConvention {
    /// `alpha = (n - h) / n`, factor `alpha^-1 F_{d+2}(q_alpha)`.
    #[default]
    Paper,
    /// `alpha = h / n`, factor `alpha / F_{d+2}(q_alpha)`.
    Standard,
}

impl std::str::FromStr for AlphaConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(AlphaConvention::Paper),
            "standard" => Ok(AlphaConvention::Standard),
            _ => Err(Error::InvalidConfig(format!("unknown alpha convention {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MrcdConfig {
    pub h_frac: f64,
    pub h: Option<usize>,
    /// Force the regularization weight instead of choosing it from the grid.
    pub rho: Option<f64>,
    pub rho_step: f64,
    pub max_condition: f64,
    /// Smallest admissible eigenvalue relative to the mean eigenvalue.
    pub min_eigen_ratio: f64,
    pub alpha_convention: AlphaConvention,
    pub max_csteps: usize,
}

impl Default for MrcdConfig {
    fn default() -> Self {
        MrcdConfig {
            h_frac: 0.75,
            h: None,
            rho: None,
            rho_step: 0.1,
            max_condition: 1000.0,
            min_eigen_ratio: 1e-6,
            alpha_convention: AlphaConvention::Paper,
            max_csteps: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialEstimate {
    Tanh,
    Spearman,
    NormalScores,
    SpatialSign,
    Bacon,
    Ogk,
}

impl fmt::Display for InitialEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InitialEstimate::Tanh => "tanh",
            InitialEstimate::Spearman => "spearman",
            InitialEstimate::NormalScores => "normal_scores",
            InitialEstimate::SpatialSign => "spatial_sign",
            InitialEstimate::Bacon => "bacon",
            InitialEstimate::Ogk => "ogk",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrcdCandidate {
    pub start: InitialEstimate,
    /// Converged h-subset (sorted row indices).
    pub subset: Vec<usize>,
    /// Log-determinant of the regularized matrix on `subset`.
    pub log_det: f64,
    pub csteps: usize,
}

fn consistency_factor(n: usize, h: usize, d: usize, conv: AlphaConvention) -> Result<f64> {
    let chi = |k: usize| {
        ChiSquared::new(k as f64).map_err(|e| Error::Numerical(format!("chi-squared({k}): {e}")))
    };
    let (cd, cd2) = (chi(d)?, chi(d + 2)?);
    let c = match conv {
        AlphaConvention::Paper => {
            let alpha = (n - h) as f64 / n as f64;
            if alpha <= 0.0 {
                return Ok(1.0);
            }
            cd2.cdf(cd.inverse_cdf(alpha)) / alpha
        }
        AlphaConvention::Standard => {
            let alpha = h as f64 / n as f64;
            if alpha >= 1.0 {
                return Ok(1.0);
            }
            alpha / cd2.cdf(cd.inverse_cdf(alpha))
        }
    };
    if c.is_finite() && c > 0.0 {
        Ok(c)
    } else {
        Err(Error::Numerical(format!("consistency factor {c}")))
    }
}

/// Smallest grid weight making `rho + (1 - rho) mu` well conditioned.
/// `zeros` counts eigenvalues equal to zero that are not listed.
fn select_rho(mu: &[f64], zeros: usize, cfg: &MrcdConfig) -> f64 {
    let d = (mu.len() + zeros) as f64;
    let steps = (1.0 / cfg.rho_step).round() as usize;
    for k in 0..=steps {
        let rho = (k as f64 * cfg.rho_step).min(1.0);
        let vals = mu.iter().map(|m| rho + (1.0 - rho) * m.max(0.0));
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, 0.0f64, 0.0);
        for v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        if zeros > 0 {
            lo = lo.min(rho);
            hi = hi.max(rho);
            sum += zeros as f64 * rho;
        }
        if lo > 0.0 && hi / lo <= cfg.max_condition && lo >= cfg.min_eigen_ratio * sum / d {
            return rho;
        }
    }
    1.0
}

fn smallest(values: &[f64], h: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(h);
    idx.sort_unstable();
    idx
}

fn rows_of(w: &DMatrix<f64>, subset: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(subset.len(), w.ncols(), |i, j| w[(subset[i], j)])
}

/// `K = rho I + a W_H' W_H`, factored either directly (d <= h) or through the
/// `h x h` Gram matrix.
struct Regularized {
    rho: f64,
    a: f64,
    wh: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    low_rank: bool,
    log_det: f64,
}

impl Regularized {
    fn new(w: &DMatrix<f64>, subset: &[usize], rho: f64, c: f64) -> Result<Regularized> {
        let h = subset.len();
        let d = w.ncols();
        let a = (1.0 - rho) * c / (h as f64 - 1.0);
        let wh = rows_of(w, subset);
        let low_rank = d > h && rho > 0.0;
        let (chol, log_det) = if low_rank {
            let mut m = &wh * wh.transpose() * (a / rho);
            for i in 0..h {
                m[(i, i)] += 1.0;
            }
            let chol = Cholesky::new(m).ok_or_else(|| Error::Singular("regularized gram matrix".into()))?;
            let ld = d as f64 * rho.ln() + chol_log_det(&chol);
            (chol, ld)
        } else {
            let mut m = wh.transpose() * &wh * a;
            for i in 0..d {
                m[(i, i)] += rho;
            }
            let chol = Cholesky::new(m).ok_or_else(|| {
                Error::Singular(format!("regularized scatter not positive definite at rho = {rho}"))
            })?;
            let ld = chol_log_det(&chol);
            (chol, ld)
        };
        Ok(Regularized {
            rho,
            a,
            wh,
            chol,
            low_rank,
            log_det,
        })
    }

    /// Squared Mahalanobis distances of every row of `w`.
    fn distances(&self, w: &DMatrix<f64>) -> Vec<f64> {
        if self.low_rank {
            let g = w * self.wh.transpose();
            let x = self.chol.solve(&g.transpose());
            let k = self.a / self.rho;
            (0..w.nrows())
                .map(|i| {
                    let quad: f64 = (0..g.ncols()).map(|j| g[(i, j)] * x[(j, i)]).sum();
                    (w.row(i).norm_squared() - k * quad) / self.rho
                })
                .collect()
        } else {
            let x = self.chol.solve(&w.transpose());
            (0..w.nrows()).map(|i| w.row(i).transpose().dot(&x.column(i))).collect()
        }
    }
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum()
}

/// Pearson correlation matrix of the columns of `y`.
fn correlation(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = y.clone();
    let d = y.ncols();
    for j in 0..d {
        let mut colm = c.column_mut(j);
        let mean = colm.mean();
        colm.add_scalar_mut(-mean);
        let norm = colm.norm();
        if norm > 0.0 {
            colm.scale_mut(1.0 / norm);
        }
    }
    let mut r = c.transpose() * c;
    for j in 0..d {
        r[(j, j)] = 1.0;
    }
    r
}

fn map_columns(w: &DMatrix<f64>, f: impl Fn(&[f64]) -> Vec<f64> + Sync) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = (0..w.ncols()).into_par_iter().map(|j| f(col(w, j))).collect();
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| cols[j][i])
}

fn start_matrix(kind: InitialEstimate, w: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (w.nrows(), w.ncols());
    match kind {
        InitialEstimate::Tanh => correlation(&w.map(f64::tanh)),
        InitialEstimate::Spearman => correlation(&map_columns(w, ranks)),
        InitialEstimate::NormalScores => {
            let normal = Normal::standard();
            correlation(&map_columns(w, |c| {
                ranks(c)
                    .into_iter()
                    .map(|r| normal.inverse_cdf((r - 1.0 / 3.0) / (n as f64 + 1.0 / 3.0)))
                    .collect()
            }))
        }
        InitialEstimate::SpatialSign => {
            let mut k = w.clone();
            for i in 0..n {
                let norm = w.row(i).norm();
                if norm > 0.0 {
                    k.row_mut(i).scale_mut(1.0 / norm);
                }
            }
            k.transpose() * k / n as f64
        }
        InitialEstimate::Bacon => {
            let norms: Vec<f64> = (0..n).map(|i| w.row(i).norm()).collect();
            let m = n.div_ceil(2);
            let mut sub = rows_of(w, &smallest(&norms, m));
            for j in 0..d {
                let mean = sub.column(j).mean();
                sub.column_mut(j).add_scalar_mut(-mean);
            }
            sub.transpose() * sub / (m as f64 - 1.0).max(1.0)
        }
        InitialEstimate::Ogk => unreachable!("ogk start is built by ogk_core"),
    }
}

const STARTS: [InitialEstimate; 6] = [
    InitialEstimate::Tanh,
    InitialEstimate::Spearman,
    InitialEstimate::NormalScores,
    InitialEstimate::SpatialSign,
    InitialEstimate::Bacon,
    InitialEstimate::Ogk,
];

/// Eigenvectors of a start and the squared tau-scales of the projections.
fn start_basis(kind: InitialEstimate, w: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    if kind == InitialEstimate::Ogk {
        return ogk_core(w);
    }
    let e = sym_eigen(&start_matrix(kind, w)).vectors;
    let b = w * &e;
    let l = (0..b.ncols())
        .into_par_iter()
        .map_init(Vec::new, |buf, j| tau_location_scale_buf(col(&b, j), buf).1.powi(2))
        .collect();
    (e, l)
}

fn initial_subset(w: &DMatrix<f64>, e: &DMatrix<f64>, l: &[f64], h: usize, cfg: &MrcdConfig) -> Vec<usize> {
    let rho = select_rho(l, 0, cfg);
    let b = w * e;
    let md: Vec<f64> = (0..w.nrows())
        .map(|i| {
            (0..b.ncols())
                .map(|j| b[(i, j)].powi(2) / (rho + (1.0 - rho) * l[j]))
                .sum()
        })
        .collect();
    smallest(&md, h)
}

/// Eigenvalues of `c S_W(H)` plus the count of structural zeros.
fn subset_spectrum(w: &DMatrix<f64>, subset: &[usize], c: f64) -> (Vec<f64>, usize) {
    let h = subset.len();
    let d = w.ncols();
    let wh = rows_of(w, subset);
    let scale = c / (h as f64 - 1.0);
    if d <= h {
        let vals = (wh.transpose() * &wh * scale).symmetric_eigenvalues();
        (vals.iter().copied().collect(), 0)
    } else {
        let vals = (&wh * wh.transpose() * scale).symmetric_eigenvalues();
        (vals.iter().copied().collect(), d - h)
    }
}

fn concentrate(
    w: &DMatrix<f64>,
    start: InitialEstimate,
    mut subset: Vec<usize>,
    rho: f64,
    c: f64,
    cfg: &MrcdConfig,
) -> Result<MrcdCandidate> {
    let h = subset.len();
    let mut reg = Regularized::new(w, &subset, rho, c)?;
    let mut steps = 0;
    while steps < cfg.max_csteps {
        let next = smallest(&reg.distances(w), h);
        if next == subset {
            break;
        }
        let cand = Regularized::new(w, &next, rho, c)?;
        steps += 1;
        if cand.log_det >= reg.log_det {
            break;
        }
        subset = next;
        reg = cand;
    }
    Ok(MrcdCandidate {
        start,
        subset,
        log_det: reg.log_det,
        csteps: steps,
    })
}

pub fn mrcd_scatter(p: &Panel, cfg: &MrcdConfig) -> Result<ScatterEstimate> {
    let (n, d) = (p.n(), p.d());
    let h = cfg.h.unwrap_or_else(|| (cfg.h_frac * n as f64 + 1e-9).floor() as usize);
    if h < 2 || h > n {
        return Err(Error::InvalidConfig(format!("mrcd subset size {h} outside [2, {n}]")));
    }
    if let Some(r) = cfg.rho {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidConfig(format!("rho {r} outside [0, 1]")));
        }
    }
    let r = panel_matrix(p);
    let scales = column_tau_scales(&r, Some(p.series_ids()))?;
    let w = standardize(&r, &scales);
    let c = consistency_factor(n, h, d, cfg.alpha_convention)?;

    let mut subsets = Vec::new();
    for kind in STARTS {
        let (e, l) = start_basis(kind, &w);
        if l.iter().any(|v| !v.is_finite()) {
            log::warn!("mrcd: {kind} start is not finite, skipped");
            continue;
        }
        subsets.push((kind, initial_subset(&w, &e, &l, h, cfg)));
    }
    if subsets.is_empty() {
        return Err(Error::Numerical("no usable mrcd initial estimate".into()));
    }
    let rho = match cfg.rho {
        Some(r) => r,
        None => subsets
            .iter()
            .map(|(_, s)| {
                let (mu, zeros) = subset_spectrum(&w, s, c);
                select_rho(&mu, zeros, cfg)
            })
            .fold(0.0, f64::max),
    };

    let mut candidates = Vec::with_capacity(subsets.len());
    for (kind, s) in subsets {
        match concentrate(&w, kind, s, rho, c, cfg) {
            Ok(cand) => candidates.push(cand),
            Err(e) => log::warn!("mrcd: {kind} start failed: {e}"),
        }
    }
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.log_det.total_cmp(&b.1.log_det).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Singular(format!("every mrcd candidate is singular at rho = {rho}")))?;
    let subset = candidates[best].subset.clone();

    let wh = rows_of(&w, &subset);
    let mut k = wh.transpose() * &wh * ((1.0 - rho) * c / (h as f64 - 1.0));
    for i in 0..d {
        k[(i, i)] += rho;
    }
    let sigma = crate::linalg::symmetrize(conjugate_diag(&k, &scales));
    Ok(ScatterEstimate {
        method: ScatterMethod::Mrcd,
        sigma,
        scales,
        diagnostics: Diagnostics {
            rho: Some(rho),
            subset: Some(subset),
            candidates,
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn pure_target_at_rho_one() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.7, 0.5]);
        let p = gaussian_panel(&l, 120, 1);
        let cfg = MrcdConfig {
            rho: Some(1.0),
            ..Default::default()
        };
        let est = mrcd_scatter(&p, &cfg).unwrap();
        let s = &est.scales;
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![s[0] * s[0], s[1] * s[1]]));
        assert!((est.sigma - expected).abs().max() < 1e-12);
    }

    #[test]
    fn clean_gaussian_is_positive_definite() {
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.3, 1.0, 0.0, -0.2, 0.4, 1.0]);
        let p = gaussian_panel(&l, 200, 2);
        let est = mrcd_scatter(&p, &MrcdConfig::default()).unwrap();
        assert!(est.sigma.clone().symmetric_eigenvalues().min() > 0.0);
        assert_eq!(est.diagnostics.candidates.len(), 6);
    }

    #[test]
    fn more_series_than_days() {
        let l = DMatrix::<f64>::identity(40, 40);
        let p = gaussian_panel(&l, 30, 3);
        let est = mrcd_scatter(&p, &MrcdConfig::default()).unwrap();
        let ld = crate::linalg::log_det_pd(&est.sigma).expect("positive definite");
        assert!(ld.is_finite());
        assert!(est.diagnostics.rho.unwrap() > 0.0);
        let best = est.diagnostics.candidates.iter().map(|c| c.log_det).fold(f64::INFINITY, f64::min);
        let win = est.diagnostics.subset.as_ref().unwrap();
        let winner = est.diagnostics.candidates.iter().find(|c| &c.subset == win).unwrap();
        assert_eq!(winner.log_det, best);
    }

    #[test]
    fn woodbury_matches_direct() {
        let l = DMatrix::<f64>::identity(12, 12);
        let p = gaussian_panel(&l, 20, 4);
        let w = panel_matrix(&p);
        let subset: Vec<usize> = (0..8).collect();
        let low = Regularized::new(&w, &subset, 0.3, 1.2).unwrap();
        assert!(low.low_rank);
        let a = 0.7 * 1.2 / 7.0;
        let wh = rows_of(&w, &subset);
        let mut k = wh.transpose() * &wh * a;
        for i in 0..12 {
            k[(i, i)] += 0.3;
        }
        let direct = crate::linalg::log_det_pd(&k).unwrap();
        assert!((low.log_det - direct).abs() < 1e-9 * direct.abs().max(1.0));
        let kinv = k.try_inverse().unwrap();
        let md = low.distances(&w);
        for i in 0..20 {
            let r = w.row(i).transpose();
            let exact = (r.transpose() * &kinv * &r)[(0, 0)];
            assert!((md[i] - exact).abs() < 1e-8 * exact.max(1.0));
        }
    }

    #[test]
    fn consistency_conventions() {
        let paper = consistency_factor(400, 300, 5, AlphaConvention::Paper).unwrap();
        let standard = consistency_factor(400, 300, 5, AlphaConvention::Standard).unwrap();
        assert!(paper > 0.0 && paper < 1.0);
        assert!(standard > 1.0);
        assert!(consistency_factor(730, 547, 1460, AlphaConvention::Paper).unwrap().is_finite());
    }

    #[test]
    fn rho_grid() {
        let cfg = MrcdConfig::default();
        assert_eq!(select_rho(&[1.0, 0.5, 0.2], 0, &cfg), 0.0);
        assert_eq!(select_rho(&[1.0, 0.5], 3, &cfg), 0.1);
        assert_eq!(select_rho(&[], 4, &cfg), 0.1);
    }
}
