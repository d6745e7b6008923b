use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::guess::{
    linear_ls, local_minima, mean, min_max, quantile, sinusoid_amplitude_phase, spectral_peaks,
    typical_step,
};

/// A parametric curve `y(x; θ)` with analytic gradient and automatic
/// starting points.
pub trait FitModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn param_names(&self) -> &'static [&'static str];
    fn eval(&self, x: f64, p: &[f64]) -> f64;
    /// `∂y/∂θ` at `x`.
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]);
    /// Candidate starting points, best first.
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>>;
    fn bounds(&self, _x: &[f64], _y: &[f64]) -> Option<Vec<(f64, f64)>> {
        None
    }
    /// Quantities read off the fit, with propagated standard errors.
    fn derived(&self, _p: &[f64], _err: &[f64]) -> Vec<(String, f64, f64)> {
        Vec::new()
    }
    /// Canonical form, e.g. ordered tones or positive widths. Swaps apply to
    /// the standard errors too.
    fn normalize(&self, p: &mut [f64], err: &mut [f64]) {
        let _ = (p, err);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    GaussianPeak,
    DoubleLorentzian,
    Rabi,
    NuclearPrecession,
    RamseyTwoTone,
    HahnEnvelope,
    G2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Linear,
        ModelKind::GaussianPeak,
        ModelKind::DoubleLorentzian,
        ModelKind::Rabi,
        ModelKind::NuclearPrecession,
        ModelKind::RamseyTwoTone,
        ModelKind::HahnEnvelope,
        ModelKind::G2,
    ];

    pub fn model(self) -> Box<dyn FitModel> {
        match self {
            ModelKind::Linear => Box::new(Linear),
            ModelKind::GaussianPeak => Box::new(GaussianPeak),
            ModelKind::DoubleLorentzian => Box::new(DoubleLorentzian),
            ModelKind::Rabi => Box::new(Sinusoid),
            ModelKind::NuclearPrecession => Box::new(NuclearSinusoid),
            ModelKind::RamseyTwoTone => Box::new(RamseyTwoTone),
            ModelKind::HahnEnvelope => Box::new(HahnEnvelope),
            ModelKind::G2 => Box::new(G2Model),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::GaussianPeak => "gaussian_peak",
            ModelKind::DoubleLorentzian => "double_lorentzian",
            ModelKind::Rabi => "rabi",
            ModelKind::NuclearPrecession => "nuclear_precession",
            ModelKind::RamseyTwoTone => "ramsey_two_tone",
            ModelKind::HahnEnvelope => "hahn_envelope",
            ModelKind::G2 => "g2",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown model '{s}'"))
    }
}

/// `y = a x + b`.
pub struct Linear;

impl FitModel for Linear {
    fn kind(&self) -> ModelKind {
        ModelKind::Linear
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["slope", "intercept"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * x + p[1]
    }
    fn gradient(&self, x: f64, _p: &[f64], out: &mut [f64]) {
        out[0] = x;
        out[1] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let one = vec![1.0; x.len()];
        vec![linear_ls(&[x.to_vec(), one], y).unwrap_or_else(|| vec![0.0, mean(y)])]
    }
}

/// `y = A exp[-(x - x0)² / 2σ²] + B`.
pub struct GaussianPeak;

impl FitModel for GaussianPeak {
    fn kind(&self) -> ModelKind {
        ModelKind::GaussianPeak
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "center", "sigma", "offset"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let u = (x - p[1]) / p[2];
        p[0] * (-0.5 * u * u).exp() + p[3]
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let d = x - p[1];
        let s2 = p[2] * p[2];
        let e = (-0.5 * d * d / s2).exp();
        out[0] = e;
        out[1] = p[0] * e * d / s2;
        out[2] = p[0] * e * d * d / (s2 * p[2]);
        out[3] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let base = quantile(y, 0.1);
        let (imax, &ymax) = y.iter().enumerate().fold((0, &f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let amp = ymax - base;
        let above = y.iter().filter(|&&v| v - base > 0.5 * amp).count().max(1);
        let width = (above as f64 * typical_step(x) / 2.355).max(typical_step(x));
        let (lo, hi) = min_max(x);
        vec![
            vec![amp, x[imax], width, base],
            vec![amp, x[imax], (hi - lo) / 10.0, base],
        ]
    }
    fn normalize(&self, p: &mut [f64], _err: &mut [f64]) {
        p[2] = p[2].abs();
    }
    fn derived(&self, p: &[f64], err: &[f64]) -> Vec<(String, f64, f64)> {
        vec![("fwhm".into(), 2.0 * (2.0 * 2f64.ln()).sqrt() * p[2].abs(), 2.0 * (2.0 * 2f64.ln()).sqrt() * err[2])]
    }
}

fn lorentz(x: f64, f: f64, w: f64) -> (f64, f64, f64) {
    let u = (x - f) / w;
    let q = 1.0 + u * u;
    let l = 1.0 / q;
    let d_f = 2.0 * u / (w * q * q);
    let d_w = 2.0 * u * u / (w * q * q);
    (l, d_f, d_w)
}

/// `y = B - A1/(1 + ((x-f1)/w1)²) - A2/(1 + ((x-f2)/w2)²)`, widths are HWHM.
pub struct DoubleLorentzian;

impl FitModel for DoubleLorentzian {
    fn kind(&self) -> ModelKind {
        ModelKind::DoubleLorentzian
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["offset", "depth1", "center1", "width1", "depth2", "center2", "width2"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] - p[1] * lorentz(x, p[2], p[3]).0 - p[4] * lorentz(x, p[5], p[6]).0
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (l1, f1, w1) = lorentz(x, p[2], p[3]);
        let (l2, f2, w2) = lorentz(x, p[5], p[6]);
        out[0] = 1.0;
        out[1] = -l1;
        out[2] = -p[1] * f1;
        out[3] = -p[1] * w1;
        out[4] = -l2;
        out[5] = -p[4] * f2;
        out[6] = -p[4] * w2;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let base = quantile(y, 0.9);
        let step = typical_step(x);
        let minima = local_minima(y);
        let first = minima.first().copied().unwrap_or(0);
        let depth1 = (base - y[first]).max(1e-12);
        // Half-depth width of the deepest dip.
        let mut l = first;
        while l > 0 && base - y[l] > 0.5 * depth1 {
            l -= 1;
        }
        let mut r = first;
        while r + 1 < y.len() && base - y[r] > 0.5 * depth1 {
            r += 1;
        }
        let hwhm = (0.5 * (x[r] - x[l]).abs()).max(step);
        // Second dip: deepest remaining minimum at least 5 linewidths away;
        // ties go to the deeper one by construction of the ordering.
        let second = minima
            .iter()
            .copied()
            .find(|&i| (x[i] - x[first]).abs() >= 5.0 * hwhm)
            .unwrap_or_else(|| {
                (0..y.len())
                    .filter(|&i| (x[i] - x[first]).abs() >= 5.0 * hwhm)
                    .min_by(|&a, &b| y[a].total_cmp(&y[b]))
                    .unwrap_or(first)
            });
        let depth2 = (base - y[second]).max(1e-12);
        let (a, b) = if x[first] <= x[second] { (first, second) } else { (second, first) };
        let (da, db) = if a == first { (depth1, depth2) } else { (depth2, depth1) };
        vec![
            vec![base, da, x[a], hwhm, db, x[b], hwhm],
            vec![base, da, x[a], 2.0 * hwhm, db, x[b], 2.0 * hwhm],
        ]
    }
    fn normalize(&self, p: &mut [f64], err: &mut [f64]) {
        p[3] = p[3].abs();
        p[6] = p[6].abs();
        if p[2] > p[5] {
            for (a, b) in [(1, 4), (2, 5), (3, 6)] {
                p.swap(a, b);
                err.swap(a, b);
            }
        }
    }
    fn derived(&self, p: &[f64], err: &[f64]) -> Vec<(String, f64, f64)> {
        vec![("splitting".into(), (p[5] - p[2]).abs(), err[2].hypot(err[5]))]
    }
}

/// `PL(t) = A sin(ω t + φ) + B` with angular `ω`.
pub struct Sinusoid;

fn sinusoid_guesses(x: &[f64], y: &[f64]) -> Vec<(f64, f64, f64, f64)> {
    let mut out = Vec::new();
    for f in spectral_peaks(x, y, 3) {
        let (a, ph, b) = sinusoid_amplitude_phase(x, y, f);
        out.push((a, f, ph, b));
    }
    if out.is_empty() {
        out.push((0.5 * (min_max(y).1 - min_max(y).0), 1.0, 0.0, mean(y)));
    }
    out
}

impl FitModel for Sinusoid {
    fn kind(&self) -> ModelKind {
        ModelKind::Rabi
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "omega", "phase", "offset"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * (p[1] * x + p[2]).sin() + p[3]
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (s, c) = (p[1] * x + p[2]).sin_cos();
        out[0] = s;
        out[1] = p[0] * x * c;
        out[2] = p[0] * c;
        out[3] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        sinusoid_guesses(x, y).into_iter().map(|(a, f, ph, b)| vec![a, 2.0 * PI * f, ph, b]).collect()
    }
    fn normalize(&self, p: &mut [f64], _err: &mut [f64]) {
        if p[0] < 0.0 {
            p[0] = -p[0];
            p[2] += PI;
        }
        if p[1] < 0.0 {
            p[1] = -p[1];
            p[2] = PI - p[2];
        }
        p[2] = p[2].rem_euclid(2.0 * PI);
    }
    fn derived(&self, p: &[f64], err: &[f64]) -> Vec<(String, f64, f64)> {
        let pi_time = PI / p[1];
        vec![("pi_time".into(), pi_time, pi_time * err[1] / p[1]), ("rabi_frequency".into(), p[1] / (2.0 * PI), err[1] / (2.0 * PI))]
    }
}

/// `PL(t) = A sin(2π f t + φ) + B` with `f` in Hz.
pub struct NuclearSinusoid;

impl FitModel for NuclearSinusoid {
    fn kind(&self) -> ModelKind {
        ModelKind::NuclearPrecession
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "frequency", "phase", "offset"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * (2.0 * PI * p[1] * x + p[2]).sin() + p[3]
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let (s, c) = (2.0 * PI * p[1] * x + p[2]).sin_cos();
        out[0] = s;
        out[1] = p[0] * 2.0 * PI * x * c;
        out[2] = p[0] * c;
        out[3] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        sinusoid_guesses(x, y).into_iter().map(|(a, f, ph, b)| vec![a, f, ph, b]).collect()
    }
    fn normalize(&self, p: &mut [f64], err: &mut [f64]) {
        Sinusoid.normalize(p, err);
    }
}

/// Two tones under one Gaussian envelope:
/// `[A1 sin(2πf1τ+φ1) + A2 sin(2πf2τ+φ2)] exp[-(τ/T2*)²] + B`.
pub struct RamseyTwoTone;

impl FitModel for RamseyTwoTone {
    fn kind(&self) -> ModelKind {
        ModelKind::RamseyTwoTone
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude1", "frequency1", "phase1", "amplitude2", "frequency2", "phase2", "t2_star", "offset"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let e = (-(x / p[6]).powi(2)).exp();
        let s1 = (2.0 * PI * p[1] * x + p[2]).sin();
        let s2 = (2.0 * PI * p[4] * x + p[5]).sin();
        (p[0] * s1 + p[3] * s2) * e + p[7]
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let e = (-(x / p[6]).powi(2)).exp();
        let (s1, c1) = (2.0 * PI * p[1] * x + p[2]).sin_cos();
        let (s2, c2) = (2.0 * PI * p[4] * x + p[5]).sin_cos();
        out[0] = s1 * e;
        out[1] = p[0] * 2.0 * PI * x * c1 * e;
        out[2] = p[0] * c1 * e;
        out[3] = s2 * e;
        out[4] = p[3] * 2.0 * PI * x * c2 * e;
        out[5] = p[3] * c2 * e;
        out[6] = (p[0] * s1 + p[3] * s2) * e * 2.0 * x * x / p[6].powi(3);
        out[7] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let (lo, hi) = min_max(x);
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let peaks = spectral_peaks(x, y, 4);
        let mut pairs = Vec::new();
        for i in 0..peaks.len() {
            for j in i + 1..peaks.len() {
                pairs.push((peaks[i], peaks[j]));
            }
        }
        if pairs.is_empty() {
            let f = peaks.first().copied().unwrap_or(1.0 / span);
            pairs.push((f, 1.5 * f));
        }
        let mut scored = Vec::new();
        for (f1, f2) in pairs.into_iter().take(3) {
            // Scan the envelope time; the rest is linear.
            for k in 0..12 {
                let t2 = span * 0.08 * 1.45f64.powi(k);
                let e: Vec<f64> = x.iter().map(|&t| (-(t / t2).powi(2)).exp()).collect();
                let cols = vec![
                    x.iter().zip(&e).map(|(&t, e)| (2.0 * PI * f1 * t).sin() * e).collect(),
                    x.iter().zip(&e).map(|(&t, e)| (2.0 * PI * f1 * t).cos() * e).collect(),
                    x.iter().zip(&e).map(|(&t, e)| (2.0 * PI * f2 * t).sin() * e).collect(),
                    x.iter().zip(&e).map(|(&t, e)| (2.0 * PI * f2 * t).cos() * e).collect(),
                    vec![1.0; x.len()],
                ];
                if let Some(c) = linear_ls(&cols, y) {
                    let resid: f64 = (0..x.len())
                        .map(|i| {
                            let m: f64 = (0..5).map(|k| c[k] * cols[k][i]).sum();
                            (y[i] - m).powi(2)
                        })
                        .sum();
                    let p = vec![c[0].hypot(c[1]), f1, c[1].atan2(c[0]), c[2].hypot(c[3]), f2, c[3].atan2(c[2]), t2, c[4]];
                    scored.push((resid, p));
                }
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        scored.into_iter().take(4).map(|s| s.1).collect()
    }
    fn normalize(&self, p: &mut [f64], err: &mut [f64]) {
        for (a, f, ph) in [(0, 1, 2), (3, 4, 5)] {
            if p[a] < 0.0 {
                p[a] = -p[a];
                p[ph] += PI;
            }
            if p[f] < 0.0 {
                p[f] = -p[f];
                p[ph] = PI - p[ph];
            }
            p[ph] = p[ph].rem_euclid(2.0 * PI);
        }
        p[6] = p[6].abs();
        if p[1] < p[4] {
            for (a, b) in [(0, 3), (1, 4), (2, 5)] {
                p.swap(a, b);
                err.swap(a, b);
            }
        }
    }
}

/// `y = A exp[-(2τ/Tc)⁴] + B`.
pub struct HahnEnvelope;

impl FitModel for HahnEnvelope {
    fn kind(&self) -> ModelKind {
        ModelKind::HahnEnvelope
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "tc", "offset"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * (-(2.0 * x / p[1]).powi(4)).exp() + p[2]
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let q = (2.0 * x / p[1]).powi(4);
        let e = (-q).exp();
        out[0] = e;
        out[1] = p[0] * e * 4.0 * q / p[1];
        out[2] = 1.0;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let n = y.len();
        let tail = n / 5;
        let b = mean(&y[n - tail.max(1)..]);
        let head = mean(&y[..(n / 10).max(1)]);
        let a = head - b;
        let half = b + 0.5 * a;
        let idx = y.iter().position(|&v| if a >= 0.0 { v < half } else { v > half }).unwrap_or(n / 2);
        let tau_half = x[idx].abs().max(typical_step(x));
        let tc = 2.0 * tau_half / 2f64.ln().powf(0.25);
        vec![vec![a, tc, b], vec![a, 2.0 * tc, b], vec![a, 0.5 * tc, b]]
    }
    fn normalize(&self, p: &mut [f64], _err: &mut [f64]) {
        p[1] = p[1].abs();
    }
}

/// `g²(τ) = ρ²[1 - β e^{-γ1|τ|} + (β-1) e^{-γ2|τ|}] + 1 - ρ²`.
pub struct G2Model;

impl FitModel for G2Model {
    fn kind(&self) -> ModelKind {
        ModelKind::G2
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["rho", "beta", "gamma1", "gamma2"]
    }
    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let t = x.abs();
        let br = 1.0 - p[1] * (-p[2] * t).exp() + (p[1] - 1.0) * (-p[3] * t).exp();
        p[0] * p[0] * (br - 1.0) + 1.0
    }
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]) {
        let t = x.abs();
        let e1 = (-p[2] * t).exp();
        let e2 = (-p[3] * t).exp();
        let br = 1.0 - p[1] * e1 + (p[1] - 1.0) * e2;
        let r2 = p[0] * p[0];
        out[0] = 2.0 * p[0] * (br - 1.0);
        out[1] = r2 * (e2 - e1);
        out[2] = r2 * p[1] * t * e1;
        out[3] = -r2 * (p[1] - 1.0) * t * e2;
    }
    fn guesses(&self, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        // Dip depth at the smallest |τ| gives ρ.
        let near: Vec<f64> = {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()));
            idx.iter().take(3).map(|&i| y[i]).collect()
        };
        let g0 = mean(&near).clamp(0.0, 0.99);
        let rho = (1.0 - g0).sqrt().clamp(0.05, 1.0);
        let (_, ymax) = min_max(y);
        let imax = y.iter().position(|&v| v == ymax).unwrap_or(0);
        let t_peak = x[imax].abs().max(typical_step(x));
        let tmax = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut out = Vec::new();
        for g1_scale in [1.0, 3.0] {
            for g2_scale in [0.3, 1.0, 3.0] {
                let g1 = g1_scale * 2.0 / t_peak;
                let g2 = g2_scale * 3.0 / tmax.max(3.0 * t_peak);
                let beta = 1.0 + (ymax - 1.0).max(0.05) / (rho * rho);
                out.push(vec![rho, beta, g1.max(g2 * 1.5), g2]);
            }
        }
        out
    }
    fn bounds(&self, _x: &[f64], _y: &[f64]) -> Option<Vec<(f64, f64)>> {
        Some(vec![(0.0, 1.0), (0.0, 50.0), (0.0, f64::INFINITY), (0.0, f64::INFINITY)])
    }
    fn derived(&self, p: &[f64], err: &[f64]) -> Vec<(String, f64, f64)> {
        vec![("g2_zero".into(), 1.0 - p[0] * p[0], 2.0 * p[0] * err[0])]
    }
}
