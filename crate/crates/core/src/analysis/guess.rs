//! Automatic starting points: spectra, extrema and linear sub-fits.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Median spacing of sorted abscissae.
pub fn typical_step(x: &[f64]) -> f64 {
    let mut d: Vec<f64> = x.windows(2).map(|w| (w[1] - w[0]).abs()).filter(|v| *v > 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Least-squares coefficients for `y ≈ Σ c_k col_k`.
pub fn linear_ls(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let m = y.len();
    let n = columns.len();
    let a = DMatrix::from_fn(m, n, |i, k| columns[k][i]);
    let b = DVector::from_row_slice(y);
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-12).ok()?;
    Some(sol.iter().copied().collect())
}

/// Spectral power of `y - mean(y)` at frequency `f` (cycles per unit x).
pub fn power_at(x: &[f64], y: &[f64], f: f64) -> f64 {
    let m = mean(y);
    let (mut re, mut im) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let ph = 2.0 * PI * f * xi;
        re += (yi - m) * ph.cos();
        im += (yi - m) * ph.sin();
    }
    re * re + im * im
}

/// Periodogram on a uniform grid up to the Nyquist frequency of the median
/// step, oversampled 8 times against the record length.
pub fn periodogram(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    let (lo, hi) = min_max(x);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let nyq = 0.5 / typical_step(x);
    let df = 1.0 / (8.0 * span);
    let n = ((nyq / df).ceil() as usize).clamp(8, 20_000);
    (1..=n).map(|k| {
        let f = k as f64 * nyq / n as f64;
        (f, power_at(x, y, f))
    })
    .collect()
}

/// Local maxima of the periodogram, strongest first, refined by a parabola
/// through the neighbouring grid points.
pub fn spectral_peaks(x: &[f64], y: &[f64], count: usize) -> Vec<f64> {
    let p = periodogram(x, y);
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for k in 1..p.len().saturating_sub(1) {
        if p[k].1 >= p[k - 1].1 && p[k].1 >= p[k + 1].1 {
            let (a, b, c) = (p[k - 1].1, p[k].1, p[k + 1].1);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
            let df = p[k + 1].0 - p[k].0;
            peaks.push((p[k].0 + shift.clamp(-0.5, 0.5) * df, b));
        }
    }
    if peaks.is_empty() && !p.is_empty() {
        let best = p.iter().cloned().fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        peaks.push(best);
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.into_iter().take(count).map(|p| p.0).collect()
}

/// Indices of local minima of a 3-point smoothed copy, deepest first.
pub fn local_minima(y: &[f64]) -> Vec<usize> {
    let n = y.len();
    if n < 3 {
        return (0..n).collect();
    }
    let s: Vec<f64> = (0..n)
        .map(|i| {
            let a = y[i.saturating_sub(1)];
            let c = y[(i + 1).min(n - 1)];
            (a + 2.0 * y[i] + c) / 4.0
        })
        .collect();
    let mut idx: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i == 0 { f64::INFINITY } else { s[i - 1] };
            let right = if i + 1 == n { f64::INFINITY } else { s[i + 1] };
            s[i] <= left && s[i] <= right
        })
        .collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    idx
}

/// Amplitude and phase of `A sin(2π f x + φ)` plus offset, by linear fit.
pub fn sinusoid_amplitude_phase(x: &[f64], y: &[f64], f: f64) -> (f64, f64, f64) {
    let s: Vec<f64> = x.iter().map(|&t| (2.0 * PI * f * t).sin()).collect();
    let c: Vec<f64> = x.iter().map(|&t| (2.0 * PI * f * t).cos()).collect();
    let one = vec![1.0; x.len()];
    match linear_ls(&[s, c, one], y) {
        Some(k) => (k[0].hypot(k[1]), k[1].atan2(k[0]), k[2]),
        None => (0.5 * (min_max(y).1 - min_max(y).0), 0.0, mean(y)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodogram_finds_tone() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 * 2e-9).collect();
        let y: Vec<f64> = x.iter().map(|t| (2.0 * PI * 13.16e6 * t + 0.3).sin()).collect();
        let f = spectral_peaks(&x, &y, 1)[0];
        assert!((f - 13.16e6).abs() < 0.2e6, "{f}");
        let (a, ph, b) = sinusoid_amplitude_phase(&x, &y, 13.16e6);
        assert!((a - 1.0).abs() < 1e-9 && (ph - 0.3).abs() < 1e-9 && b.abs() < 1e-9);
    }

    #[test]
    fn minima_sorted_by_depth() {
        let y = [5.0, 4.0, 5.0, 5.0, 1.0, 5.0, 5.0];
        let m = local_minima(&y);
        assert_eq!(m[0], 4);
        assert!(m.contains(&1));
    }
}
