use serde::{Deserialize, Serialize};

/// PCB antenna geometry: hole diameter and objective standoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pcb {
    pub hole_d_mm: f64,
    pub standoff_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsProfile {
    pub na: f64,
    /// Excitation wavelength, µm.
    pub wavelength: f64,
    /// Lateral Gaussian PSF σ, µm.
    pub psf_sigma: f64,
    /// Axial Gaussian PSF σ, µm.
    pub psf_sigma_axial: f64,
    pub pcb: Pcb,
}

impl Default for OpticsProfile {
    fn default() -> Self {
        let (na, wavelength) = (0.9, 0.532);
        // Gaussian fit to an Airy disc: FWHM ≈ 0.51 λ / NA.
        let sigma = 0.51 * wavelength / na / FWHM_PER_SIGMA;
        Self { na, wavelength, psf_sigma: sigma, psf_sigma_axial: 3.0 * sigma, pcb: Pcb { hole_d_mm: 1.0, standoff_um: 200.0 } }
    }
}

pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

impl OpticsProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.na > 0.0 && self.na < 1.0) {
            return Err(format!("NA {} outside (0, 1)", self.na));
        }
        if !(self.psf_sigma > 0.0 && self.psf_sigma_axial > 0.0 && self.wavelength > 0.0) {
            return Err("PSF widths and wavelength must be positive".into());
        }
        if !(self.pcb.hole_d_mm > 0.0 && self.pcb.standoff_um >= 0.0) {
            return Err("PCB geometry must be positive".into());
        }
        Ok(())
    }

    /// Relative collection from an emitter displaced by `d` (µm) from focus.
    pub fn psf(&self, d: [f64; 3]) -> f64 {
        let lat = (d[0] * d[0] + d[1] * d[1]) / (2.0 * self.psf_sigma * self.psf_sigma);
        let ax = d[2] * d[2] / (2.0 * self.psf_sigma_axial * self.psf_sigma_axial);
        (-(lat + ax)).exp()
    }

    /// Displacements beyond this (µm, any axis) contribute below 1e-12.
    pub fn reach(&self) -> f64 {
        7.5 * self.psf_sigma_axial.max(self.psf_sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApertureCheck {
    pub ok: bool,
    /// `d − 2 l NA`, mm. Negative when the hole clips the collection cone.
    pub margin_mm: f64,
    pub threshold_mm: f64,
}

/// The objective's light cone must pass the PCB hole: `d > 2 l NA`.
pub fn aperture_ok(optics: &OpticsProfile) -> ApertureCheck {
    let threshold_mm = 2.0 * optics.pcb.standoff_um * 1e-3 * optics.na;
    let margin_mm = optics.pcb.hole_d_mm - threshold_mm;
    ApertureCheck { ok: margin_mm > 1e-12, margin_mm, threshold_mm }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_pcb(hole_d_mm: f64, standoff_um: f64) -> OpticsProfile {
        OpticsProfile { pcb: Pcb { hole_d_mm, standoff_um }, ..OpticsProfile::default() }
    }

    #[test]
    fn one_millimetre_hole_passes() {
        let a = aperture_ok(&with_pcb(1.0, 200.0));
        assert!(a.ok);
        assert!((a.threshold_mm - 0.36).abs() < 1e-12);
    }

    #[test]
    fn boundary_fails() {
        assert!(!aperture_ok(&with_pcb(0.36, 200.0)).ok);
    }

    #[test]
    fn deep_standoff_fails_with_margin() {
        let a = aperture_ok(&with_pcb(0.8, 500.0));
        assert!(!a.ok);
        assert!((a.margin_mm + 0.1).abs() < 1e-12);
    }

    #[test]
    fn default_psf_width() {
        let o = OpticsProfile::default();
        let fwhm = o.psf_sigma * FWHM_PER_SIGMA;
        assert!((fwhm - 0.51 * 0.532 / 0.9).abs() < 1e-12);
        assert_eq!(o.psf([0.0; 3]), 1.0);
        assert!((o.psf([0.5 * fwhm, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    }
}
