use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::SpinError;

/// Nuclear-spin bath seen by the electron.
///
/// The bath field is split into a part oscillating at the 13C Larmor frequency
/// (weight `revival_depth`) and a slowly drifting part. Both are Gaussian, so
/// coherence decays as the exponential of a quadratic in the accumulated lags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinBath {
    /// Echo collapse time, s.
    pub tc: f64,
    /// Bath Larmor frequency, Hz.
    pub larmor: f64,
    pub revival_depth: f64,
}

impl SpinBath {
    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.tc > 0.0) {
            return Err(SpinError::NonPositiveDephasing(self.tc));
        }
        if self.larmor < 0.0 || !self.larmor.is_finite() {
            return Err(SpinError::NegativeLarmor(self.larmor));
        }
        if !(0.0..=1.0).contains(&self.revival_depth) {
            return Err(SpinError::InvalidParams(format!(
                "revival depth {} outside [0, 1]",
                self.revival_depth
            )));
        }
        Ok(())
    }

    fn effective_depth(&self) -> f64 {
        if self.larmor > 0.0 {
            self.revival_depth
        } else {
            0.0
        }
    }

    /// Coefficients `(c_z, c_y)` of `|z|²` and `y²` in the decay exponent.
    pub(crate) fn coefficients(&self) -> (f64, f64) {
        let d = self.effective_depth();
        let tc4 = self.tc.powi(4);
        let cz = if d > 0.0 { 4.0 * d / (PI * PI * self.larmor * self.larmor * tc4) } else { 0.0 };
        let cy = 16.0 * (1.0 - d) / tc4;
        (cz, cy)
    }

    /// Angular Larmor frequency, rad/s.
    pub(crate) fn omega(&self) -> f64 {
        2.0 * PI * self.larmor
    }
}

/// Hahn-echo coherence after free time `2 tau`.
///
/// `C = exp[-(2τ/Tc)^4 · (d · sinc⁴(π f_L τ) + 1 - d)]` with `sinc x = sin x / x`.
/// Equal to 1 at the revivals `τ = k / f_L` of the oscillating part, and to the
/// plain quartic collapse when `f_L τ ≪ 1`.
pub fn hahn_echo_response(tau: f64, bath: &SpinBath) -> Result<f64, SpinError> {
    bath.validate()?;
    if tau < 0.0 {
        return Err(SpinError::NegativeDuration(tau));
    }
    let d = bath.effective_depth();
    let x = PI * bath.larmor * tau;
    let sinc = if x.abs() < 1e-8 { 1.0 } else { x.sin() / x };
    let q = (2.0 * tau / bath.tc).powi(4);
    Ok((-q * (d * sinc.powi(4) + 1.0 - d)).exp())
}
