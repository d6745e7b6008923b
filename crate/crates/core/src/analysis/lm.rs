//! Damped Gauss-Newton (Levenberg-Marquardt) with Marquardt scaling.

use nalgebra::{DMatrix, DVector};

use super::FitError;

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step ends the fit.
    pub cost_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 200, cost_tolerance: 1e-10, gradient_tolerance: 1e-8, initial_lambda: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// `½ Σ r²` after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Jacobian of the weighted residuals at the solution.
    pub jacobian: DMatrix<f64>,
    pub residuals: DVector<f64>,
}

impl LmOutcome {
    pub fn cost(&self) -> f64 {
        *self.cost_trace.last().unwrap_or(&f64::INFINITY)
    }
}

/// Minimizes `½‖r(p)‖²`. `problem` returns residuals and their Jacobian
/// (rows = residuals). Parameters are clamped to `bounds` when given.
pub fn minimize<F>(
    mut problem: F,
    p0: &[f64],
    bounds: Option<&[(f64, f64)]>,
    opts: &LmOptions,
) -> Result<LmOutcome, FitError>
where
    F: FnMut(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let clamp = |p: &mut [f64]| {
        if let Some(b) = bounds {
            for (v, (lo, hi)) in p.iter_mut().zip(b) {
                *v = v.clamp(*lo, *hi);
            }
        }
    };
    let mut p = p0.to_vec();
    clamp(&mut p);
    let (mut r, mut j) = problem(&p);
    if r.iter().any(|v| !v.is_finite()) || j.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let mut cost = 0.5 * r.norm_squared();
    let mut trace = vec![cost];
    let mut lambda = opts.initial_lambda;
    let n = p.len();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let g = j.transpose() * &r;
        let a = j.transpose() * &j;
        // Cosine between the residual and each Jacobian column, so the test
        // does not depend on parameter or data units.
        let rn = r.norm();
        let gcos = (0..n)
            .map(|i| {
                let d = a[(i, i)].sqrt() * rn;
                if d > 0.0 {
                    g[i].abs() / d
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        if gcos < opts.gradient_tolerance || cost == 0.0 {
            converged = true;
            break;
        }
        // Scale so the damped system is invariant to parameter units.
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = a[(i, i)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let scaled_a = DMatrix::from_fn(n, n, |i, k| a[(i, k)] * scale[i] * scale[k]);
        let scaled_g = DVector::from_fn(n, |i, _| g[i] * scale[i]);
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = scaled_a.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * damped[(i, i)].max(1e-12) + lambda * 1e-12;
            }
            let step = match damped.clone().cholesky() {
                Some(c) => c.solve(&(-&scaled_g)),
                None => match damped.lu().solve(&(-&scaled_g)) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let mut trial: Vec<f64> = (0..n).map(|i| p[i] + step[i] * scale[i]).collect();
            clamp(&mut trial);
            let moved = trial
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-300))
                .fold(0.0, f64::max);
            let (tr, tj) = problem(&trial);
            let tcost = 0.5 * tr.norm_squared();
            if tcost.is_finite() && tcost < cost && tj.iter().all(|v| v.is_finite()) {
                let rel = (cost - tcost) / cost.max(f64::MIN_POSITIVE);
                p = trial;
                r = tr;
                j = tj;
                cost = tcost;
                trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < opts.cost_tolerance || moved < 1e-15 {
                    converged = true;
                }
                break;
            }
            if moved < 1e-15 {
                // No representable improvement left; the point is stationary.
                converged = true;
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            converged = lambda >= 1e16;
            break;
        }
    }
    Ok(LmOutcome { params: p, cost_trace: trace, iterations, converged, jacobian: j, residuals: r })
}

/// Central-difference Jacobian, for problems without an analytic one.
pub fn numeric_jacobian<F>(f: &mut F, p: &[f64], m: usize) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> DVector<f64>,
{
    let mut j = DMatrix::zeros(m, p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let h = 1e-6 * p[k].abs().max(1e-8);
        q[k] = p[k] + h;
        let up = f(&q);
        q[k] = p[k] - h;
        let down = f(&q);
        q[k] = p[k];
        for i in 0..m {
            j[(i, k)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    j
}
