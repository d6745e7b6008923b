//! Five-level rate model of optical cycling.
//!
//! Levels are `g0, g1, e0, e1, s`: ground and excited triplet split into the
//! `m_s = 0` and aggregated `m_s = ±1` manifolds, plus the metastable singlet.

mod calibrate;
mod correlate;
mod stream;

pub use calibrate::{calibrate, CalibrationReport, CalibrationTargets};
pub use correlate::{correlate, Correlation, Correlator};
pub use stream::{
    sample_photon_stream, tags_from_csv, tags_to_csv, CwEmitter, LaserSegment, PhotonStream, PS_PER_S, TAG_CSV_HEADER,
};
pub(crate) use stream::poisson_tags;

use nalgebra::{DMatrix, Matrix5, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const G0: usize = 0;
pub const G1: usize = 1;
pub const E0: usize = 2;
pub const E1: usize = 3;
pub const S: usize = 4;

/// Singlet lifetime at room temperature.
pub const SINGLET_LIFETIME: f64 = 178e-9;
/// Excited-state lifetime, one twelfth of the singlet lifetime.
pub const RADIATIVE_LIFETIME: f64 = SINGLET_LIFETIME / 12.0;
/// Reference excitation power, µW.
pub const REFERENCE_POWER_UW: f64 = 270.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhotoError {
    #[error("invalid populations: {0}")]
    InvalidPopulations(String),
    #[error("invalid rate parameters: {0}")]
    InvalidRates(String),
    #[error("time step must be positive, got {0} s")]
    NonPositiveStep(f64),
    #[error("steady-state emission rate is zero")]
    ZeroSteadyRate,
    #[error("calibration did not converge: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPopulations {
    pub p: [f64; 5],
}

impl LevelPopulations {
    pub fn level(i: usize) -> Self {
        let mut p = [0.0; 5];
        p[i] = 1.0;
        Self { p }
    }

    /// Ground-state split with no optical excitation.
    pub fn ground(p0: f64) -> Self {
        Self { p: [p0, 1.0 - p0, 0.0, 0.0, 0.0] }
    }

    pub fn validate(&self) -> Result<(), PhotoError> {
        let sum: f64 = self.p.iter().sum();
        if self.p.iter().any(|v| !(v.is_finite() && *v >= -1e-12)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PhotoError::InvalidPopulations(format!("{:?}", self.p)));
        }
        Ok(())
    }

    /// `p(g0) / (p(g0) + p(g1))`.
    pub fn ground_polarization(&self) -> f64 {
        self.p[G0] / (self.p[G0] + self.p[G1])
    }

    fn vec(&self) -> Vector5<f64> {
        Vector5::from_row_slice(&self.p)
    }

    fn from_vec(v: &Vector5<f64>) -> Self {
        let mut p = [0.0; 5];
        for (o, x) in p.iter_mut().zip(v.iter()) {
            *o = x.max(0.0);
        }
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            p.iter_mut().for_each(|x| *x /= s);
        }
        Self { p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// g → e under laser, Hz.
    pub pump_rate: f64,
    pub radiative_rate: f64,
    pub isc_e1: f64,
    pub isc_e0: f64,
    pub singlet_rate: f64,
    pub singlet_branch_g0: f64,
    pub collection_efficiency: f64,
    pub background_rate: f64,
}

/// Calibrated defaults at the reference power. See `calibrate`.
pub const DEFAULT_ISC_E0: f64 = 34.187e6;
pub const DEFAULT_ISC_E1: f64 = 80.0e6;
pub const DEFAULT_SINGLET_BRANCH_G0: f64 = 0.77061;
pub const DEFAULT_COLLECTION_EFFICIENCY: f64 = 0.0083;

impl Default for RateParams {
    fn default() -> Self {
        let kr = 1.0 / RADIATIVE_LIFETIME;
        Self {
            pump_rate: Saturation::default().pump_rate(REFERENCE_POWER_UW),
            radiative_rate: kr,
            isc_e1: DEFAULT_ISC_E1,
            isc_e0: DEFAULT_ISC_E0,
            singlet_rate: 1.0 / SINGLET_LIFETIME,
            singlet_branch_g0: DEFAULT_SINGLET_BRANCH_G0,
            collection_efficiency: DEFAULT_COLLECTION_EFFICIENCY,
            background_rate: 0.0,
        }
    }
}

/// Saturating pump law `r_sat · P / (P + P_sat)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub r_sat: f64,
    /// µW.
    pub p_sat: f64,
}

impl Default for Saturation {
    fn default() -> Self {
        Self { r_sat: 1.0 / RADIATIVE_LIFETIME, p_sat: REFERENCE_POWER_UW }
    }
}

impl Saturation {
    pub fn pump_rate(&self, power_uw: f64) -> f64 {
        if power_uw <= 0.0 {
            0.0
        } else {
            self.r_sat * power_uw / (power_uw + self.p_sat)
        }
    }
}

impl RateParams {
    pub fn with_pump(mut self, pump_rate: f64) -> Self {
        self.pump_rate = pump_rate;
        self
    }

    pub fn validate(&self) -> Result<(), PhotoError> {
        let rates = [
            self.pump_rate,
            self.radiative_rate,
            self.isc_e1,
            self.isc_e0,
            self.singlet_rate,
            self.background_rate,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(PhotoError::InvalidRates(format!("{self:?}")));
        }
        for f in [self.singlet_branch_g0, self.collection_efficiency] {
            if !(0.0..=1.0).contains(&f) {
                return Err(PhotoError::InvalidRates(format!("fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Generator `M` with `dp/dt = M p`. `mw_rate` is an incoherent
    /// `g0 <-> g1` drive rate (g0 → g1 at `W`, back at `W/2`).
    pub fn matrix(&self, laser_on: bool, mw_rate: f64) -> Matrix5<f64> {
        let mut m = Matrix5::zeros();
        let mut add = |from: usize, to: usize, rate: f64| {
            m[(to, from)] += rate;
            m[(from, from)] -= rate;
        };
        if laser_on {
            add(G0, E0, self.pump_rate);
            add(G1, E1, self.pump_rate);
        }
        add(E0, G0, self.radiative_rate);
        add(E1, G1, self.radiative_rate);
        add(E0, S, self.isc_e0);
        add(E1, S, self.isc_e1);
        add(S, G0, self.singlet_rate * self.singlet_branch_g0);
        add(S, G1, self.singlet_rate * (1.0 - self.singlet_branch_g0));
        if mw_rate > 0.0 {
            add(G0, G1, mw_rate);
            add(G1, G0, 0.5 * mw_rate);
        }
        m
    }

    /// Collected photons per unit time from a population vector.
    pub fn emission_rate(&self, pop: &LevelPopulations) -> f64 {
        self.collection_efficiency * self.radiative_rate * (pop.p[E0] + pop.p[E1])
    }

    /// Steady state under CW excitation.
    pub fn steady_state(&self, mw_rate: f64) -> LevelPopulations {
        let m = self.matrix(true, mw_rate);
        // Replace one balance equation by normalization.
        let mut a = m;
        let mut b = Vector5::zeros();
        for j in 0..5 {
            a[(4, j)] = 1.0;
        }
        b[4] = 1.0;
        let x = a.lu().solve(&b).unwrap_or_else(|| Vector5::from_element(0.2));
        LevelPopulations::from_vec(&x)
    }
}

/// Incoherent spin-flip rate from a MW drive of Rabi frequency `rabi` (Hz)
/// detuned by `detuning` (Hz), with optical pumping and `T2*` broadening the
/// transition.
pub fn mw_pump_rate(rabi: f64, detuning: f64, pump_rate: f64, t2_star: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let gamma2 = pump_rate + if t2_star.is_finite() { 1.0 / t2_star } else { 0.0 };
    let om = two_pi * rabi;
    let d = two_pi * detuning;
    if gamma2 <= 0.0 {
        return 0.0;
    }
    0.5 * om * om * gamma2 / (gamma2 * gamma2 + d * d)
}

/// Propagator over `dt` together with its time integral.
#[derive(Debug, Clone)]
pub struct RatePropagator {
    pub transfer: Matrix5<f64>,
    pub integral: Matrix5<f64>,
}

impl RatePropagator {
    pub fn new(m: &Matrix5<f64>, dt: f64) -> Self {
        let mut aug = DMatrix::<f64>::zeros(10, 10);
        for i in 0..5 {
            for j in 0..5 {
                aug[(i, j)] = m[(i, j)] * dt;
            }
            aug[(5 + i, i)] = dt;
        }
        let e = aug.exp();
        let mut transfer = Matrix5::zeros();
        let mut integral = Matrix5::zeros();
        for i in 0..5 {
            for j in 0..5 {
                transfer[(i, j)] = e[(i, j)];
                integral[(i, j)] = e[(5 + i, j)];
            }
        }
        Self { transfer, integral }
    }

    /// Returns the propagated populations and expected collected photons.
    pub fn apply(&self, pop: &LevelPopulations, r: &RateParams) -> (LevelPopulations, f64) {
        let v = pop.vec();
        let next = self.transfer * v;
        let int = self.integral * v;
        let emitted = r.collection_efficiency * r.radiative_rate * (int[E0] + int[E1]);
        (LevelPopulations::from_vec(&next), emitted)
    }
}

/// `exp(M dt) p` and the expected collected photon count over `dt`.
pub fn evolve_rates(
    pop: &LevelPopulations,
    r: &RateParams,
    laser_on: bool,
    dt: f64,
) -> Result<(LevelPopulations, f64), PhotoError> {
    evolve_rates_mw(pop, r, laser_on, 0.0, dt)
}

pub fn evolve_rates_mw(
    pop: &LevelPopulations,
    r: &RateParams,
    laser_on: bool,
    mw_rate: f64,
    dt: f64,
) -> Result<(LevelPopulations, f64), PhotoError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(PhotoError::NonPositiveStep(dt));
    }
    pop.validate()?;
    r.validate()?;
    Ok(RatePropagator::new(&r.matrix(laser_on, mw_rate), dt).apply(pop, r))
}

/// Laser pulse used for initialization.
pub const POLARIZE_PULSE: f64 = 10e-6;
/// Dark wait after it, long against the singlet lifetime.
pub const POLARIZE_WAIT: f64 = 5e-6;

/// Long laser pulse followed by relaxation into the ground manifold.
pub fn polarize(pop: &LevelPopulations, r: &RateParams) -> Result<LevelPopulations, PhotoError> {
    let (lit, _) = evolve_rates(pop, r, true, POLARIZE_PULSE)?;
    let (dark, _) = evolve_rates(&lit, r, false, POLARIZE_WAIT)?;
    Ok(dark)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub mean_counts_bright: f64,
    pub mean_counts_dark: f64,
    pub contrast: f64,
}

/// Expected collected photons in a window opened at the start of a laser
/// pulse, from pure `g0` (bright) and pure `g1` (dark).
pub fn readout_window(r: &RateParams, window: f64) -> Result<Readout, PhotoError> {
    if !(window > 0.0) {
        return Err(PhotoError::NonPositiveStep(window));
    }
    let (_, bright) = evolve_rates(&LevelPopulations::level(G0), r, true, window)?;
    let (_, dark) = evolve_rates(&LevelPopulations::level(G1), r, true, window)?;
    let contrast = if bright > 0.0 { 1.0 - dark / bright } else { 0.0 };
    Ok(Readout { mean_counts_bright: bright, mean_counts_dark: dark, contrast })
}

/// Second-order correlation of a single emitter mixed with uncorrelated
/// background, `g² = ρ² (g²_NV − 1) + 1`, evaluated at `|τ|`.
pub fn g2_analytic(r: &RateParams, rho: f64, tau_grid: &[f64]) -> Result<Vec<f64>, PhotoError> {
    r.validate()?;
    let ss = r.steady_state(0.0);
    let rate = r.radiative_rate * (ss.p[E0] + ss.p[E1]);
    if !(rate > 0.0) {
        return Err(PhotoError::ZeroSteadyRate);
    }
    // Spin-preserving decay: the emitting manifold sets the restart state.
    let e = ss.p[E0] + ss.p[E1];
    let start = Vector5::new(ss.p[E0] / e, ss.p[E1] / e, 0.0, 0.0, 0.0);
    let m = r.matrix(true, 0.0);
    let mut out = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let t = tau.abs();
        let p = if t == 0.0 { start } else { (m * t).exp() * start };
        let g_nv = r.radiative_rate * (p[E0] + p[E1]) / rate;
        out.push(rho * rho * (g_nv - 1.0) + 1.0);
    }
    Ok(out)
}

/// Non-zero decay rates of the CW generator, ascending.
pub fn cw_relaxation_rates(r: &RateParams) -> Vec<f64> {
    let m = r.matrix(true, 0.0);
    let mut rates: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|z| -z.re)
        .filter(|v| *v > 1e-3)
        .collect();
    rates.sort_by(f64::total_cmp);
    rates
}
