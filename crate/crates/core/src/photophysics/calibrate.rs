//! Fits the unobserved rates `isc_e0`, `isc_e1` and the singlet branching to
//! the measured polarization and readout contrast.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{polarize, readout_window, LevelPopulations, PhotoError, RateParams, G1};
use crate::analysis::lm::{minimize, numeric_jacobian, LmOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub polarization: f64,
    pub contrast: f64,
    /// Readout window for the contrast target, s.
    pub window: f64,
    /// Weak log-normal prior on `isc_e1` that picks one point on the
    /// otherwise one-dimensional solution curve.
    pub isc_e1_prior: f64,
    pub isc_e1_log_sigma: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self { polarization: 0.80, contrast: 0.30, window: 300e-9, isc_e1_prior: 80e6, isc_e1_log_sigma: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rates: RateParams,
    pub polarization: f64,
    pub contrast: f64,
    /// Half-life of singlet population with the laser off, s.
    pub singlet_half_life: f64,
    pub iterations: usize,
}

fn observables(r: &RateParams, window: f64) -> Result<(f64, f64), PhotoError> {
    let pol = polarize(&LevelPopulations::level(G1), r)?.ground_polarization();
    let c = readout_window(r, window)?.contrast;
    Ok((pol, c))
}

fn with_params(base: &RateParams, q: &[f64]) -> RateParams {
    let mut r = *base;
    r.isc_e0 = q[0].exp();
    r.isc_e1 = q[1].exp();
    r.singlet_branch_g0 = 1.0 / (1.0 + (-q[2]).exp());
    r
}

/// Calibrates starting from `base`; radiative and singlet rates stay fixed.
pub fn calibrate(base: &RateParams, t: &CalibrationTargets) -> Result<CalibrationReport, PhotoError> {
    base.validate()?;
    let tol = 0.002;
    let mut residuals = |q: &[f64]| {
        let r = with_params(base, q);
        let (pol, c) = observables(&r, t.window).unwrap_or((f64::NAN, f64::NAN));
        DVector::from_vec(vec![
            (pol - t.polarization) / tol,
            (c - t.contrast) / tol,
            (r.isc_e1 / t.isc_e1_prior).ln() / t.isc_e1_log_sigma,
        ])
    };
    let start = [30e6f64.ln(), 60e6f64.ln(), 0.8];
    let out = minimize(
        |q| {
            let r = residuals(q);
            let j = numeric_jacobian(&mut residuals, q, 3);
            (r, j)
        },
        &start,
        None,
        &LmOptions::default(),
    )
    .map_err(|e| PhotoError::Calibration(e.to_string()))?;
    if !out.converged {
        return Err(PhotoError::Calibration(format!("{} iterations", out.iterations)));
    }
    let rates = with_params(base, &out.params);
    let (polarization, contrast) = observables(&rates, t.window)?;
    Ok(CalibrationReport {
        rates,
        polarization,
        contrast,
        singlet_half_life: std::f64::consts::LN_2 / rates.singlet_rate,
        iterations: out.iterations,
    })
}
