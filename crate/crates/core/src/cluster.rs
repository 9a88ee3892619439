//! Feature-based k-means over residual series.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::OutlierReport;
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::seed;
use crate::stats;
use crate::trend::TrendCycleSpec;
use crate::typology::Typology;

pub const ACF_LAGS: usize = 50;
pub const FEATURE_COUNT: usize = 8 + 3 + 4 + ACF_LAGS + 3;

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ["mean", "std", "max", "min", "mad", "iqr", "skewness", "kurtosis"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend(["trend0", "trend1", "trend2"].map(String::from));
    names.extend(["amp1", "amp2", "phase1", "phase2"].map(String::from));
    names.extend((1..=ACF_LAGS).map(|j| format!("acf{j}")));
    names.extend(["pgram_zero", "pgram_week", "pgram_month"].map(String::from));
    names
}

/// `arctan(b / b*)` folded into `(-pi/2, pi/2]`.
fn phase(cos_coef: f64, sin_coef: f64) -> f64 {
    if sin_coef == 0.0 {
        return if cos_coef == 0.0 { 0.0 } else { PI / 2.0 };
    }
    let a = (cos_coef / sin_coef).atan();
    if a <= -PI / 2.0 {
        PI / 2.0
    } else {
        a
    }
}

/// `|sum_t r_t e^{-i w t}|^2 / (2 pi n)`.
fn periodogram_at(r: &[f64], w: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in r.iter().enumerate() {
        let a = w * (t + 1) as f64;
        re += v * a.cos();
        im -= v * a.sin();
    }
    (re * re + im * im) / (2.0 * PI * r.len() as f64)
}

/// Largest periodogram ordinate among the three Fourier frequencies nearest `target`.
fn periodogram_near(r: &[f64], target: f64) -> f64 {
    let n = r.len();
    let step = 2.0 * PI / n as f64;
    let mut ks: Vec<usize> = (0..=n / 2).collect();
    ks.sort_by(|&a, &b| {
        let (da, db) = ((a as f64 * step - target).abs(), (b as f64 * step - target).abs());
        da.total_cmp(&db).then(a.cmp(&b))
    });
    ks.iter()
        .take(3)
        .map(|&k| periodogram_at(r, k as f64 * step))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Feature vector of one residual series. `coefficients` follow the layout of
/// `spec`; missing trend terms or harmonics contribute zeros.
pub fn extract_features(r: &[f64], coefficients: &[f64], spec: &TrendCycleSpec) -> Result<Vec<f64>> {
    let n = r.len();
    if n <= ACF_LAGS {
        return Err(Error::InsufficientData(format!(
            "{n} observations, need more than {ACF_LAGS} for the autocorrelations"
        )));
    }
    if coefficients.len() != spec.width() {
        return Err(Error::DimensionMismatch {
            expected: spec.width(),
            got: coefficients.len(),
        });
    }
    let mut f = Vec::with_capacity(FEATURE_COUNT);
    f.push(stats::mean(r));
    f.push(stats::std_dev(r));
    f.push(r.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    f.push(r.iter().copied().fold(f64::INFINITY, f64::min));
    f.push(stats::mad(r));
    f.push(stats::iqr(r));
    f.push(stats::skewness(r));
    f.push(stats::kurtosis(r));
    for k in 0..3 {
        f.push(if k <= spec.trend_order { coefficients[k] } else { 0.0 });
    }
    let harmonic = |j: usize| -> (f64, f64) {
        if j < spec.harmonics() {
            let at = spec.trend_order + 1 + 2 * j;
            (coefficients[at], coefficients[at + 1])
        } else {
            (0.0, 0.0)
        }
    };
    for j in 0..2 {
        let (c, s) = harmonic(j);
        f.push(c.hypot(s));
    }
    for j in 0..2 {
        let (c, s) = harmonic(j);
        f.push(phase(c, s));
    }
    for j in 1..=ACF_LAGS {
        let s: f64 = (j..n).map(|t| r[t] * r[t - j]).sum();
        f.push(s / (n - j) as f64);
    }
    for target in [0.0, 2.0 * PI / 7.0, 2.0 * PI / 30.0] {
        f.push(periodogram_near(r, target));
    }
    debug_assert_eq!(f.len(), FEATURE_COUNT);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature".into()));
    }
    Ok(f)
}

/// Features for every row of a residual panel.
pub fn panel_features(residuals: &Panel, coefficients: &[Vec<f64>], spec: &TrendCycleSpec) -> Result<Vec<Vec<f64>>> {
    if coefficients.len() != residuals.d() {
        return Err(Error::DimensionMismatch {
            expected: residuals.d(),
            got: coefficients.len(),
        });
    }
    (0..residuals.d())
        .into_par_iter()
        .map(|i| extract_features(residuals.series(i), &coefficients[i], spec))
        .collect()
}

/// Column z-scores (population sd); constant columns become zero.
pub fn standardize(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(p) = features.first().map(|f| f.len()) else {
        return Vec::new();
    };
    let rows = features.len() as f64;
    let mut out = features.to_vec();
    for j in 0..p {
        let m = features.iter().map(|f| f[j]).sum::<f64>() / rows;
        let sd = (features.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / rows).sqrt();
        for row in out.iter_mut() {
            row[j] = if sd > 0.0 { (row[j] - m) / sd } else { 0.0 };
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            k: 5,
            restarts: 50,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub wss: f64,
    /// Final WSS of every restart, in restart order.
    pub restart_wss: Vec<f64>,
    /// WSS after each Lloyd iteration of the winning restart.
    pub wss_path: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Mean distance from each centroid to the other centroids.
    pub fn inter_distances(&self) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|a| {
                if k < 2 {
                    return 0.0;
                }
                let s: f64 = (0..k)
                    .filter(|&b| b != a)
                    .map(|b| sq_dist(&self.centroids[a], &self.centroids[b]).sqrt())
                    .sum();
                s / (k - 1) as f64
            })
            .collect()
    }

    /// Mean distance from members to their centroid.
    pub fn intra_distances(&self, features: &[Vec<f64>]) -> Vec<f64> {
        let mut sum = vec![0.0; self.k()];
        for (f, &l) in features.iter().zip(&self.labels) {
            sum[l] += sq_dist(f, &self.centroids[l]).sqrt();
        }
        sum.iter()
            .zip(self.sizes())
            .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

struct Lloyd {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    wss: f64,
    path: Vec<f64>,
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(f, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(features: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], dist: &mut [f64]) -> bool {
    let mut changed = false;
    for (i, f) in features.iter().enumerate() {
        let (c, d) = nearest(f, centroids);
        if c != labels[i] {
            labels[i] = c;
            changed = true;
        }
        dist[i] = d;
    }
    changed
}

fn lloyd(features: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> Lloyd {
    let (rows, k, p) = (features.len(), centroids.len(), features[0].len());
    let mut labels = vec![usize::MAX; rows];
    let mut dist = vec![0.0; rows];
    let mut path = Vec::new();
    assign(features, &centroids, &mut labels, &mut dist);
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in features.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed the empty cluster at the point worst served by its centroid.
                let far = (0..rows)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centroids[c] = features[far].clone();
                dist[far] = 0.0;
            }
        }
        let changed = assign(features, &centroids, &mut labels, &mut dist);
        path.push(dist.iter().sum());
        if !changed {
            break;
        }
    }
    let wss = dist.iter().sum();
    Lloyd {
        centroids,
        labels,
        wss,
        path,
    }
}

fn plus_plus(features: &[Vec<f64>], k: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let rows = features.len();
    let mut centroids = vec![features[rng.gen_range(0..rows)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = rows - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.gen_range(0..rows)
        };
        centroids.push(features[pick].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn check_input(features: &[Vec<f64>], k: usize) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let p = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bad.len(),
        });
    }
    if k == 0 || k > features.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in [1, {}]",
            features.len()
        )));
    }
    Ok(())
}

/// Seeded k-means with k-means++ starts; keeps the restart with the lowest WSS.
pub fn kmeans(features: &[Vec<f64>], cfg: &KmeansConfig) -> Result<ClusterModel> {
    check_input(features, cfg.k)?;
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::InvalidConfig("restarts and max_iter must be >= 1".into()));
    }
    let runs: Vec<Lloyd> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(cfg.seed, &[seed::label("kmeans"), cfg.k as u64, r as u64]);
            let start = plus_plus(features, cfg.k, &mut rng);
            lloyd(features, start, cfg.max_iter)
        })
        .collect();
    let restart_wss: Vec<f64> = runs.iter().map(|r| r.wss).collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(a, x), (b, y)| x.wss.total_cmp(&y.wss).then(a.cmp(b)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    Ok(ClusterModel {
        centroids: best.centroids,
        labels: best.labels,
        wss: best.wss,
        restart_wss,
        wss_path: best.path,
    })
}

/// Best WSS for `k = 1..=k_max`. Each `k` also tries the `k - 1` solution with
/// one extra centroid at its worst-served point, so the curve never rises.
pub fn elbow_curve(features: &[Vec<f64>], k_max: usize, cfg: &KmeansConfig) -> Result<Vec<ClusterModel>> {
    check_input(features, k_max)?;
    let mut out: Vec<ClusterModel> = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut model = kmeans(features, &KmeansConfig { k, ..cfg.clone() })?;
        if let Some(prev) = out.last() {
            let far = features
                .iter()
                .enumerate()
                .map(|(i, f)| (i, sq_dist(f, &prev.centroids[prev.labels[i]])))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut start = prev.centroids.clone();
            start.push(features[far].clone());
            let split = lloyd(features, start, cfg.max_iter);
            if split.wss < model.wss {
                model.centroids = split.centroids;
                model.labels = split.labels;
                model.wss = split.wss;
                model.wss_path = split.path;
            }
            assert!(model.wss <= prev.wss * (1.0 + 1e-12) + 1e-12, "elbow curve must not rise");
        }
        out.push(model);
    }
    Ok(out)
}

/// Series-level flags derived from one detector's report.
#[derive(Debug, Clone, Default)]
pub struct FlaggedSets {
    pub any: BTreeSet<usize>,
    pub lso: BTreeSet<usize>,
    pub ao: BTreeSet<usize>,
}

impl FlaggedSets {
    /// Map report events onto row indices of `ids`; unknown ids are ignored.
    pub fn from_report(report: &OutlierReport, ids: &[String]) -> FlaggedSets {
        let index: std::collections::HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut sets = FlaggedSets::default();
        for e in &report.events {
            let Some(&i) = index.get(e.series_id.as_str()) else {
                continue;
            };
            sets.any.insert(i);
            match e.typology {
                Some(Typology::Lso) => {
                    sets.lso.insert(i);
                }
                Some(Typology::Ao) => {
                    sets.ao.insert(i);
                }
                _ => {}
            }
        }
        sets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub cluster: usize,
    pub count: usize,
    pub percent: f64,
    pub inter: f64,
    pub intra: f64,
    /// Per detector: percent of the cluster's series flagged, with an LSO, with an AO.
    pub overlap: Vec<(String, f64, f64, f64)>,
}

pub fn overlap_report(model: &ClusterModel, features: &[Vec<f64>], detectors: &[(String, FlaggedSets)]) -> Vec<OverlapRow> {
    let sizes = model.sizes();
    let inter = model.inter_distances();
    let intra = model.intra_distances(features);
    let total = model.labels.len().max(1) as f64;
    (0..model.k())
        .map(|c| {
            let members: Vec<usize> = (0..model.labels.len()).filter(|&i| model.labels[i] == c).collect();
            let pct = |set: &BTreeSet<usize>| {
                if members.is_empty() {
                    0.0
                } else {
                    100.0 * members.iter().filter(|i| set.contains(i)).count() as f64 / members.len() as f64
                }
            };
            OverlapRow {
                cluster: c + 1,
                count: sizes[c],
                percent: 100.0 * sizes[c] as f64 / total,
                inter: inter[c],
                intra: intra[c],
                overlap: detectors
                    .iter()
                    .map(|(name, s)| (name.clone(), pct(&s.any), pct(&s.lso), pct(&s.ao)))
                    .collect(),
            }
        })
        .collect()
}

/// Cluster with the largest share of flagged members, intersected with the flagged set.
pub fn refined_subset(model: &ClusterModel, flagged: &BTreeSet<usize>) -> (usize, Vec<usize>) {
    let sizes = model.sizes();
    let mut hits = vec![0usize; model.k()];
    for &i in flagged {
        if let Some(&l) = model.labels.get(i) {
            hits[l] += 1;
        }
    }
    let share = |c: usize| if sizes[c] == 0 { 0.0 } else { hits[c] as f64 / sizes[c] as f64 };
    let best = (0..model.k())
        .max_by(|&a, &b| share(a).total_cmp(&share(b)).then(b.cmp(&a)))
        .unwrap_or(0);
    let subset = flagged
        .iter()
        .copied()
        .filter(|&i| model.labels.get(i) == Some(&best))
        .collect();
    (best, subset)
}

pub fn write_labels<W: Write>(ids: &[String], labels: &[usize], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["series_id", "cluster"])?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), &(l + 1).to_string()])?;
    }
    w.flush().map_err(|e| Error::io("labels", e))?;
    Ok(())
}

pub fn write_overlap<W: Write>(rows: &[OverlapRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["cluster", "count", "percent", "inter_distance", "intra_distance"]
        .map(String::from)
        .to_vec();
    if let Some(first) = rows.first() {
        for (name, ..) in &first.overlap {
            header.extend([format!("{name}_flagged"), format!("{name}_lso"), format!("{name}_ao")]);
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.cluster.to_string(),
            r.count.to_string(),
            r.percent.to_string(),
            r.inter.to_string(),
            r.intra.to_string(),
        ];
        for (_, a, l, o) in &r.overlap {
            rec.extend([a.to_string(), l.to_string(), o.to_string()]);
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("overlap", e))?;
    Ok(())
}

pub fn write_elbow<W: Write>(models: &[ClusterModel], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "wss"])?;
    for m in models {
        w.write_record([m.k().to_string(), m.wss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("elbow", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn spec() -> TrendCycleSpec {
        TrendCycleSpec::default()
    }

    fn blobs(per: usize, sep: f64, s: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(s, &[]);
        (0..2 * per)
            .map(|i| {
                let shift = if i < per { 0.0 } else { sep };
                (0..3)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); shift + z * 0.5 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_residuals() {
        let coefs = [1.0, 2.0, 3.0, 0.3, 0.4, 0.0, -2.0];
        let f = extract_features(&[0.0; 120], &coefs, &spec()).unwrap();
        assert_eq!(f.len(), FEATURE_COUNT);
        assert!(f[..8].iter().all(|v| *v == 0.0));
        assert_eq!(&f[8..11], &[1.0, 2.0, 3.0]);
        assert!((f[11] - 0.5).abs() < 1e-12 && (f[12] - 2.0).abs() < 1e-12);
        assert!((f[13] - (0.75f64).atan()).abs() < 1e-12);
        assert_eq!(f[14], 0.0);
        assert!(f[15..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phase_range() {
        for (c, s) in [(1.0, 0.0), (-1.0, 0.0), (1.0, -1e-300), (-3.0, 2.0), (0.0, 0.0)] {
            let p = phase(c, s);
            assert!(p > -PI / 2.0 && p <= PI / 2.0, "{c} {s} -> {p}");
        }
    }

    #[test]
    fn weekly_cosine_dominates() {
        let r: Vec<f64> = (1..=364).map(|t| (2.0 * PI * t as f64 / 7.0).cos()).collect();
        let f = extract_features(&r, &[0.0; 7], &spec()).unwrap();
        let (zero, week, month) = (f[65], f[66], f[67]);
        // Exact Fourier frequency: the ordinate is n / (8 pi).
        assert!((week - 364.0 / (8.0 * PI)).abs() < 1e-8);
        assert!(week > 100.0 * zero.max(month));
    }

    #[test]
    fn white_noise_acf_band() {
        let n = 2000;
        let mut rng = seed::rng(11, &[]);
        let r: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let f = extract_features(&r, &[0.0; 7], &spec()).unwrap();
        let band = 4.0 / (n as f64).sqrt();
        let inside = f[15..65].iter().filter(|v| v.abs() <= band).count();
        assert!(inside >= 45, "{inside}");
    }

    #[test]
    fn too_short_for_acf() {
        assert!(extract_features(&[1.0; 50], &[0.0; 7], &spec()).is_err());
    }

    #[test]
    fn separates_blobs() {
        let f = blobs(40, 10.0, 1);
        let m = kmeans(&f, &KmeansConfig { k: 2, restarts: 10, ..Default::default() }).unwrap();
        assert!(m.labels[..40].iter().all(|l| *l == m.labels[0]));
        assert!(m.labels[40..].iter().all(|l| *l != m.labels[0]));
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let f = blobs(20, 3.0, 2);
        let m = kmeans(&f, &KmeansConfig { k: 1, restarts: 3, ..Default::default() }).unwrap();
        for j in 0..3 {
            let mean = f.iter().map(|r| r[j]).sum::<f64>() / f.len() as f64;
            assert!((m.centroids[0][j] - mean).abs() < 1e-12);
        }
        let total: f64 = f.iter().map(|r| sq_dist(r, &m.centroids[0])).sum();
        assert!((m.wss - total).abs() < 1e-9);
    }

    #[test]
    fn best_restart_and_monotone_lloyd() {
        let f = blobs(50, 1.5, 3);
        let m = kmeans(&f, &KmeansConfig { k: 4, restarts: 50, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(m.restart_wss.len(), 50);
        assert!(m.restart_wss.iter().all(|w| m.wss <= *w));
        assert!(m.wss_path.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        for (i, x) in f.iter().enumerate() {
            assert_eq!(nearest(x, &m.centroids).0, m.labels[i]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let f = blobs(30, 2.0, 4);
        let cfg = KmeansConfig { k: 3, restarts: 8, seed: 5, ..Default::default() };
        assert_eq!(kmeans(&f, &cfg).unwrap(), kmeans(&f, &cfg).unwrap());
    }

    #[test]
    fn elbow_drops_at_two() {
        let f = blobs(40, 10.0, 5);
        let curve = elbow_curve(&f, 3, &KmeansConfig { restarts: 10, ..Default::default() }).unwrap();
        let w: Vec<f64> = curve.iter().map(|m| m.wss).collect();
        assert!(w[0] - w[1] > 10.0 * (w[1] - w[2]));
        assert!(w.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn k_equals_rows_has_zero_wss() {
        let f = blobs(5, 2.0, 6);
        let curve = elbow_curve(&f, f.len(), &KmeansConfig { restarts: 5, ..Default::default() }).unwrap();
        assert!(curve.last().unwrap().wss < 1e-18);
        assert!(kmeans(&f, &KmeansConfig { k: 11, ..Default::default() }).is_err());
    }

    #[test]
    fn affine_rescaling_keeps_labels() {
        let f = blobs(30, 3.0, 7);
        let g: Vec<Vec<f64>> = f
            .iter()
            .map(|r| vec![3.0 * r[0] - 1.0, 0.01 * r[1] + 5.0, -7.0 * r[2]])
            .collect();
        let cfg = KmeansConfig { k: 3, restarts: 10, ..Default::default() };
        let a = kmeans(&standardize(&f), &cfg).unwrap();
        let b = kmeans(&standardize(&g), &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn overlap_rows() {
        let f = blobs(10, 10.0, 8);
        let m = kmeans(&f, &KmeansConfig { k: 2, restarts: 5, ..Default::default() }).unwrap();
        let none = overlap_report(&m, &f, &[("har".into(), FlaggedSets::default())]);
        assert!(none.iter().all(|r| r.overlap[0].1 == 0.0));
        let mut sets = FlaggedSets::default();
        sets.any.extend(0..10);
        let rows = overlap_report(&m, &f, &[("har".into(), sets.clone())]);
        assert_eq!(rows[m.labels[0]].overlap[0].1, 100.0);
        assert_eq!(rows[m.labels[10]].overlap[0].1, 0.0);
        assert!((rows.iter().map(|r| r.percent).sum::<f64>() - 100.0).abs() < 1e-9);
        let (c, subset) = refined_subset(&m, &sets.any);
        assert_eq!(c, m.labels[0]);
        assert_eq!(subset, (0..10).collect::<Vec<_>>());
    }
}
