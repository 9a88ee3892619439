//! Order statistics and moments shared by every estimator.

use std::cmp::Ordering;

/// Consistency factor turning a raw MAD into a normal standard deviation.
pub const MAD_NORMAL: f64 = 1.482_602_218_505_602;

#[inline]
pub(crate) fn total_cmp(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Median of a scratch buffer; reorders `buf`.
pub fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (lo, m, _) = buf.select_nth_unstable_by(mid, total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn median(x: &[f64]) -> f64 {
    let mut buf = x.to_vec();
    median_in_place(&mut buf)
}

/// Raw median absolute deviation `med(|x - med(x)|)`.
pub fn mad(x: &[f64]) -> f64 {
    let mut buf = x.to_vec();
    mad_in_place(&mut buf).1
}

/// Returns `(median, mad)`; `buf` is overwritten.
pub fn mad_in_place(buf: &mut [f64]) -> (f64, f64) {
    let med = median_in_place(buf);
    for v in buf.iter_mut() {
        *v = (*v - med).abs();
    }
    (med, median_in_place(buf))
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(x: &[f64], k: f64) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(total_cmp);
    quantile_sorted(&sorted, k)
}

pub fn quantile_sorted(sorted: &[f64], k: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let k = k.clamp(0.0, 1.0);
    let pos = k * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn std_dev(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// `(n-1)^-1 sigma^-3 sum (x - mean)^3`, zero for constant input.
pub fn skewness(x: &[f64]) -> f64 {
    standardized_moment(x, 3)
}

/// `(n-1)^-1 sigma^-4 sum (x - mean)^4`, zero for constant input.
pub fn kurtosis(x: &[f64]) -> f64 {
    standardized_moment(x, 4)
}

fn standardized_moment(x: &[f64], order: i32) -> f64 {
    let n = x.len();
    let s = std_dev(x);
    if n < 2 || s == 0.0 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(order)).sum::<f64>() / ((n - 1) as f64 * s.powi(order))
}

pub fn iqr(x: &[f64]) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(total_cmp);
    quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)
}

/// Mean and population standard deviation over finite entries.
pub fn finite_mean_std(x: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in x.clone().filter(|v| v.is_finite()) {
        sum += v;
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0, 0);
    }
    let m = sum / count as f64;
    let var = x
        .filter(|v| v.is_finite())
        .map(|v| (v - m).powi(2))
        .sum::<f64>()
        / count as f64;
    (m, var.sqrt(), count)
}

/// 1-based average ranks (ties share the mean rank).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of two equal-length slices; zero when either is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn mad_hand_computed() {
        // |x - 3| = [2, 1, 0, 1, 2] -> median 1
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0]), 1.0);
        assert_eq!(mad(&[7.0; 9]), 0.0);
    }

    #[test]
    fn mad_scale_equivariant() {
        let x = [0.3, -1.2, 4.4, 2.0, 0.0, 9.1, -3.3];
        for c in [-2.5, 0.5, 3.0] {
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            assert!((mad(&scaled) - c.abs() * mad(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.75), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 1.0), 3.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn moments_of_symmetric_sample() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert!(skewness(&x).abs() < 1e-12);
        assert!(kurtosis(&x) > 0.0);
        assert_eq!(skewness(&[1.0; 4]), 0.0);
    }
}
