//! Curve fitting for every lab: a Levenberg-Marquardt engine and the models
//! it is used with.

pub mod guess;
pub mod lm;
mod models;

pub use models::{
    DoubleLorentzian, FitModel, G2Model, GaussianPeak, HahnEnvelope, Linear, ModelKind,
    NuclearSinusoid, RamseyTwoTone, Sinusoid,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lm::{minimize, LmOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("x has {x} points but y has {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("{points} points cannot constrain {params} parameters")]
    TooFewPoints { points: usize, params: usize },
    #[error("uncertainties must be positive and finite")]
    InvalidSigma,
    #[error("data or model produced non-finite values")]
    NonFinite,
    #[error("fit did not converge within {0} iterations")]
    NonConvergence(usize),
    #[error("jacobian is rank deficient at the optimum")]
    DegenerateJacobian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub name: String,
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub names: Vec<String>,
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub reduced_chi2: f64,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub cost_trace: Vec<f64>,
    pub derived: Vec<Derived>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.errors[i])
    }

    pub fn derived(&self, name: &str) -> Option<&Derived> {
        self.derived.iter().find(|d| d.name == name)
    }

    /// Rows of `x, y, y_fit, residual`.
    pub fn curve(&self, x: &[f64], y: &[f64]) -> Vec<[f64; 4]> {
        let m = self.model.model();
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| {
                let f = m.eval(xi, &self.params);
                [xi, yi, f, yi - f]
            })
            .collect()
    }
}

fn check_inputs(
    model: &dyn FitModel,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> Result<Vec<f64>, FitError> {
    if x.len() != y.len() {
        return Err(FitError::LengthMismatch { x: x.len(), y: y.len() });
    }
    let params = model.param_names().len();
    if x.len() < params + 1 {
        return Err(FitError::TooFewPoints { points: x.len(), params });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    match sigma {
        Some(s) => {
            if s.len() != y.len() {
                return Err(FitError::LengthMismatch { x: s.len(), y: y.len() });
            }
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(FitError::InvalidSigma);
            }
            Ok(s.iter().map(|v| 1.0 / v).collect())
        }
        None => Ok(vec![1.0; y.len()]),
    }
}

fn run(
    model: &dyn FitModel,
    x: &[f64],
    y: &[f64],
    w: &[f64],
    p0: &[f64],
) -> Result<lm::LmOutcome, FitError> {
    let n = model.param_names().len();
    let bounds = model.bounds(x, y);
    let mut grad = vec![0.0; n];
    minimize(
        |p| {
            let mut r = DVector::zeros(x.len());
            let mut j = DMatrix::zeros(x.len(), n);
            for i in 0..x.len() {
                r[i] = (model.eval(x[i], p) - y[i]) * w[i];
                model.gradient(x[i], p, &mut grad);
                for k in 0..n {
                    j[(i, k)] = grad[k] * w[i];
                }
            }
            (r, j)
        },
        p0,
        bounds.as_deref(),
        &LmOptions::default(),
    )
}

fn finish(model: &dyn FitModel, points: usize, out: lm::LmOutcome) -> Result<FitResult, FitError> {
    let n = out.params.len();
    let dof = (points - n).max(1) as f64;
    let chi2 = out.residuals.norm_squared();
    let reduced = chi2 / dof;
    let jtj = out.jacobian.transpose() * &out.jacobian;
    // Invert in the Marquardt-scaled basis for conditioning.
    let d: Vec<f64> = (0..n).map(|i| jtj[(i, i)].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(FitError::DegenerateJacobian);
    }
    let scaled = DMatrix::from_fn(n, n, |i, k| jtj[(i, k)] / (d[i] * d[k]));
    let svd = scaled.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-13 * smax) {
        return Err(FitError::DegenerateJacobian);
    }
    let inv = scaled.try_inverse().ok_or(FitError::DegenerateJacobian)?;
    let mut errors: Vec<f64> = (0..n).map(|i| (inv[(i, i)] * reduced).max(0.0).sqrt() / d[i]).collect();
    let mut params = out.params.clone();
    model.normalize(&mut params, &mut errors);
    let derived = model
        .derived(&params, &errors)
        .into_iter()
        .map(|(name, value, error)| Derived { name, value, error })
        .collect();
    Ok(FitResult {
        model: model.kind(),
        names: model.param_names().iter().map(|s| s.to_string()).collect(),
        params,
        errors,
        reduced_chi2: reduced,
        residual_norm: chi2.sqrt(),
        converged: out.converged,
        iterations: out.iterations,
        cost_trace: out.cost_trace,
        derived,
    })
}

/// Fits with automatic starting points, keeping the lowest-cost converged run.
pub fn fit(
    model: &dyn FitModel,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> Result<FitResult, FitError> {
    let w = check_inputs(model, x, y, sigma)?;
    let mut best: Option<lm::LmOutcome> = None;
    let mut last_err = FitError::NonConvergence(LmOptions::default().max_iterations);
    for p0 in model.guesses(x, y) {
        match run(model, x, y, &w, &p0) {
            Ok(o) if o.converged => {
                if best.as_ref().is_none_or(|b| o.cost() < b.cost()) {
                    best = Some(o);
                }
            }
            Ok(_) => {}
            Err(e) => last_err = e,
        }
    }
    let out = best.ok_or(last_err)?;
    finish(model, x.len(), out)
}

/// Fits from an explicit starting point.
pub fn fit_from(
    model: &dyn FitModel,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    p0: &[f64],
) -> Result<FitResult, FitError> {
    let w = check_inputs(model, x, y, sigma)?;
    let out = run(model, x, y, &w, p0)?;
    if !out.converged {
        return Err(FitError::NonConvergence(out.iterations));
    }
    finish(model, x.len(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_normal_equations() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.3 * v - 0.7 + 0.05 * (v * 7.0).sin()).collect();
        let s: Vec<f64> = x.iter().map(|v| 0.1 + 0.01 * v).collect();
        let r = fit(&Linear, &x, &y, Some(&s)).unwrap();
        // Weighted normal equations.
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..x.len() {
            let w = 1.0 / (s[i] * s[i]);
            sw += w;
            sx += w * x[i];
            sy += w * y[i];
            sxx += w * x[i] * x[i];
            sxy += w * x[i] * y[i];
        }
        let det = sw * sxx - sx * sx;
        let slope = (sw * sxy - sx * sy) / det;
        let icpt = (sxx * sy - sx * sxy) / det;
        assert!((r.params[0] - slope).abs() < 1e-9);
        assert!((r.params[1] - icpt).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(fit(&Linear, &[1.0], &[1.0, 2.0], None), Err(FitError::LengthMismatch { .. })));
        assert!(matches!(fit(&Linear, &[1.0, 2.0], &[1.0, 2.0], None), Err(FitError::TooFewPoints { .. })));
        assert!(matches!(
            fit(&Linear, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], Some(&[1.0, 0.0, 1.0])),
            Err(FitError::InvalidSigma)
        ));
    }

    #[test]
    fn noiseless_rabi_recovery() {
        let x: Vec<f64> = (0..80).map(|i| i as f64 * 2.5e-9).collect();
        let truth = [0.12, 2.0 * std::f64::consts::PI * 13.16e6, 1.4, 0.86];
        let y: Vec<f64> = x.iter().map(|&t| Sinusoid.eval(t, &truth)).collect();
        let r = fit(&Sinusoid, &x, &y, None).unwrap();
        for (a, b) in r.params.iter().zip(truth) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} {b}");
        }
        let pi = r.derived("pi_time").unwrap().value;
        assert!((pi - 38e-9).abs() < 0.01e-9);
    }
}
