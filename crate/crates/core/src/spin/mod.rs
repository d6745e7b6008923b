//! Ground-state spin physics of a single NV center.
//!
//! Frequencies are in Hz (cycles per second), times in seconds and fields in
//! tesla. The electron basis is ordered `m_s = +1, 0, -1`; when a nuclear spin
//! is present the joint index is `electron * nuclear_dim + nuclear`.

mod bath;
mod dynamics;
mod state;

pub use bath::{hahn_echo_response, SpinBath};
pub use dynamics::{
    apply_mw_pulse, apply_mw_pulse_inhomogeneous, free_evolve, nuclear_precess, MwDrive,
    nuclear_precess_about, pulse_transfer_probability, rabi_unitary,
};
pub use state::{Dephasing, ElectronSpinState, NuclearMixture, RotatingFrame, SpinState};

use nalgebra::{Complex, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex<f64>;

pub const ZERO_FIELD_SPLITTING: f64 = 2.870e9;
/// Electron gyromagnetic ratio, Hz/T.
pub const GAMMA_E: f64 = 28.024e9;
/// 13C gyromagnetic ratio, Hz/T.
pub const GAMMA_C13: f64 = 10.705e6;
pub const GAUSS: f64 = 1e-4;

/// Electron level indices in the `+1, 0, -1` basis.
pub const LEVEL_PLUS: usize = 0;
pub const LEVEL_ZERO: usize = 1;
pub const LEVEL_MINUS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("invalid spin parameters: {0}")]
    InvalidParams(String),
    #[error("negative duration {0} s")]
    NegativeDuration(f64),
    #[error("negative splitting {0} Hz")]
    NegativeSplitting(f64),
    #[error("dephasing time must be positive, got {0} s")]
    NonPositiveDephasing(f64),
    #[error("negative Larmor frequency {0} Hz")]
    NegativeLarmor(f64),
    #[error("rabi frequency must be non-negative, got {0} Hz")]
    NegativeRabi(f64),
    #[error("unknown drive target branch")]
    UnknownBranch,
    #[error("no rotating frame set; apply a drive or set one before free evolution")]
    NoFrame,
}

/// Which `m_s = 0 <-> ±1` transition a drive addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Minus1,
    Plus1,
}

impl Branch {
    pub fn ms(self) -> f64 {
        match self {
            Branch::Minus1 => -1.0,
            Branch::Plus1 => 1.0,
        }
    }

    pub fn level(self) -> usize {
        match self {
            Branch::Minus1 => LEVEL_MINUS,
            Branch::Plus1 => LEVEL_PLUS,
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Minus1 => Branch::Plus1,
            Branch::Plus1 => Branch::Minus1,
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = SpinError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minus1" | "-1" | "minus" => Ok(Branch::Minus1),
            "plus1" | "+1" | "1" | "plus" => Ok(Branch::Plus1),
            _ => Err(SpinError::UnknownBranch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "species", rename_all = "snake_case")]
pub enum NuclearSpecies {
    #[default]
    None,
    /// Nitrogen-15, I = 1/2, axial hyperfine in Hz.
    N15 { a_par: f64 },
    /// Nearby carbon-13, I = 1/2, axial hyperfine in Hz, gyromagnetic ratio Hz/T.
    C13 { a_par: f64, gamma_n: f64 },
}

impl NuclearSpecies {
    pub fn dim(&self) -> usize {
        match self {
            NuclearSpecies::None => 1,
            _ => 2,
        }
    }

    /// Nuclear projections in index order (index 0 is "down").
    pub fn projections(&self) -> &'static [f64] {
        match self {
            NuclearSpecies::None => &[0.0],
            _ => &[-0.5, 0.5],
        }
    }

    pub fn a_par(&self) -> f64 {
        match *self {
            NuclearSpecies::None => 0.0,
            NuclearSpecies::N15 { a_par } | NuclearSpecies::C13 { a_par, .. } => a_par,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinParams {
    /// Zero-field splitting, Hz.
    pub d: f64,
    /// Electron gyromagnetic ratio, Hz/T.
    pub gamma_e: f64,
    /// Field in the NV frame (z along the NV axis), T.
    pub b: [f64; 3],
    #[serde(default)]
    pub nuclear: NuclearSpecies,
    #[serde(default)]
    pub strain_off_axis: f64,
}

impl Default for SpinParams {
    fn default() -> Self {
        Self {
            d: ZERO_FIELD_SPLITTING,
            gamma_e: GAMMA_E,
            b: [0.0; 3],
            nuclear: NuclearSpecies::None,
            strain_off_axis: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineLine {
    pub branch: Branch,
    pub m_i: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFrequencies {
    pub f_minus: f64,
    pub f_plus: f64,
    pub hyperfine_lines: Vec<HyperfineLine>,
}

impl TransitionFrequencies {
    pub fn branch(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Minus1 => self.f_minus,
            Branch::Plus1 => self.f_plus,
        }
    }

    /// Line frequency for a branch and nuclear index.
    pub fn line(&self, branch: Branch, nuclear_index: usize) -> f64 {
        self.hyperfine_lines
            .iter()
            .filter(|l| l.branch == branch)
            .nth(nuclear_index)
            .map(|l| l.frequency)
            .unwrap_or_else(|| self.branch(branch))
    }
}

pub(crate) fn spin_matrices() -> (Matrix3<C64>, Matrix3<C64>, Matrix3<C64>) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let z = C64::new(0.0, 0.0);
    let r = C64::new(s, 0.0);
    let i = C64::new(0.0, s);
    let sx = Matrix3::new(z, r, z, r, z, r, z, r, z);
    let sy = Matrix3::new(z, -i, z, i, z, -i, z, i, z);
    let sz = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        C64::new(1.0, 0.0),
        z,
        C64::new(-1.0, 0.0),
    ));
    (sx, sy, sz)
}

impl SpinParams {
    pub fn with_field(mut self, b: [f64; 3]) -> Self {
        self.b = b;
        self
    }

    pub fn with_nuclear(mut self, nuclear: NuclearSpecies) -> Self {
        self.nuclear = nuclear;
        self
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(SpinError::InvalidParams(format!("D must be positive, got {}", self.d)));
        }
        if !(self.gamma_e > 0.0) || !self.gamma_e.is_finite() {
            return Err(SpinError::InvalidParams(format!(
                "gamma_e must be positive, got {}",
                self.gamma_e
            )));
        }
        if self.b.iter().any(|c| !c.is_finite()) {
            return Err(SpinError::InvalidParams("field must be finite".into()));
        }
        if !self.nuclear.a_par().is_finite() || !self.strain_off_axis.is_finite() {
            return Err(SpinError::InvalidParams("hyperfine and strain must be finite".into()));
        }
        Ok(())
    }

    /// Ground-state Hamiltonian in Hz, basis `+1, 0, -1`.
    pub fn hamiltonian(&self) -> Matrix3<C64> {
        let (sx, sy, sz) = spin_matrices();
        let re = |v: f64| C64::new(v, 0.0);
        let g = self.gamma_e;
        sz * sz * re(self.d)
            + (sx * re(self.b[0]) + sy * re(self.b[1]) + sz * re(self.b[2])) * re(g)
            + (sx * sx - sy * sy) * re(self.strain_off_axis)
    }

    pub fn transverse_field(&self) -> f64 {
        self.b[0].hypot(self.b[1])
    }

    pub fn field_magnitude(&self) -> f64 {
        self.b.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Nuclear Larmor frequency of the coupled 13C in the `m_s = 0` manifold.
    pub fn nuclear_larmor(&self) -> Option<f64> {
        match self.nuclear {
            NuclearSpecies::C13 { gamma_n, .. } => Some(gamma_n * self.field_magnitude()),
            _ => None,
        }
    }
}

/// `|0> <-> |∓1>` transition frequencies plus hyperfine-resolved lines.
///
/// Frequencies are eigenvalue differences of the full 3x3 Hamiltonian. Each
/// eigenvector is labelled by its dominant `m_s` component. Hyperfine lines
/// shift each branch by `m_s * m_I * A_par`.
pub fn transition_frequencies(p: &SpinParams) -> TransitionFrequencies {
    let eig = SymmetricEigen::new(p.hamiltonian());
    let weight = |k: usize, level: usize| eig.eigenvectors[(level, k)].norm_sqr();
    let zero = (0..3)
        .max_by(|&a, &b| weight(a, LEVEL_ZERO).total_cmp(&weight(b, LEVEL_ZERO)))
        .unwrap();
    let rest: Vec<usize> = (0..3).filter(|&k| k != zero).collect();
    let (minus, plus) = if weight(rest[0], LEVEL_MINUS) >= weight(rest[1], LEVEL_MINUS) {
        (rest[0], rest[1])
    } else {
        (rest[1], rest[0])
    };
    let e0 = eig.eigenvalues[zero];
    let f_minus = eig.eigenvalues[minus] - e0;
    let f_plus = eig.eigenvalues[plus] - e0;
    let a = p.nuclear.a_par();
    let mut hyperfine_lines = Vec::new();
    for branch in [Branch::Minus1, Branch::Plus1] {
        let f = if branch == Branch::Minus1 { f_minus } else { f_plus };
        for &m_i in p.nuclear.projections() {
            hyperfine_lines.push(HyperfineLine {
                branch,
                m_i,
                frequency: f + branch.ms() * m_i * a,
            });
        }
    }
    TransitionFrequencies { f_minus, f_plus, hyperfine_lines }
}

/// Field magnitude from the splitting of the two ODMR dips.
///
/// Uses the axial-field approximation `B = Δf / (2 γe)`; transverse components
/// shift both lines together and are ignored here.
pub fn field_from_splitting(delta_f: f64, gamma_e: f64) -> Result<f64, SpinError> {
    if delta_f < 0.0 || !delta_f.is_finite() {
        return Err(SpinError::NegativeSplitting(delta_f));
    }
    Ok(delta_f / (2.0 * gamma_e))
}

/// Finds the NV-frame field `(B_axial, B_transverse)` that places the two
/// electron lines at the requested frequencies. Newton iteration on the full
/// Hamiltonian; returns `None` when the targets are unreachable.
pub fn field_for_lines(base: &SpinParams, f_minus: f64, f_plus: f64) -> Option<(f64, f64)> {
    let mut bz = ((f_plus - f_minus) / (2.0 * base.gamma_e)).max(0.0);
    let mut bt = 0.0f64;
    let eval = |bz: f64, bt: f64| {
        let tf = transition_frequencies(&base.with_field([bt, 0.0, bz]));
        (tf.f_minus - f_minus, tf.f_plus - f_plus)
    };
    // The lines are symmetric in bt, so start the transverse guess from the
    // second-order shift of the midpoint.
    let mid_shift = 0.5 * (f_minus + f_plus) - base.d;
    if mid_shift > 0.0 {
        bt = (mid_shift * base.d / 1.5).sqrt() / base.gamma_e;
    }
    for _ in 0..60 {
        let (r1, r2) = eval(bz, bt);
        if r1.abs() < 1e-3 && r2.abs() < 1e-3 {
            return Some((bz, bt));
        }
        let h = 1e-9;
        let (a1, a2) = eval(bz + h, bt);
        let (b1, b2) = eval(bz, bt + h);
        let j = nalgebra::Matrix2::new((a1 - r1) / h, (b1 - r1) / h, (a2 - r2) / h, (b2 - r2) / h);
        let step = j.try_inverse()? * nalgebra::Vector2::new(r1, r2);
        bz -= step[0];
        bt = (bt - step[1]).abs();
    }
    let (r1, r2) = eval(bz, bt);
    (r1.abs() < 1.0 && r2.abs() < 1.0).then_some((bz, bt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_lines_are_degenerate() {
        let tf = transition_frequencies(&SpinParams::default());
        assert!((tf.f_minus - 2.870e9).abs() < 1.0);
        assert!((tf.f_plus - 2.870e9).abs() < 1.0);
    }

    #[test]
    fn axial_field_matches_closed_form() {
        let bz = 78.65e6 / GAMMA_E;
        let tf = transition_frequencies(&SpinParams::default().with_field([0.0, 0.0, bz]));
        assert!((tf.f_minus - 2.79135e9).abs() < 1e3, "{}", tf.f_minus);
        assert!((tf.f_plus - 2.94865e9).abs() < 1e3, "{}", tf.f_plus);
        assert!(((tf.f_minus - (2.870e9 - 78.65e6)) / tf.f_minus).abs() < 1e-6);
    }

    #[test]
    fn c13_hyperfine_doublet() {
        let p = SpinParams::default()
            .with_field([0.0, 0.0, 50.0 * GAUSS])
            .with_nuclear(NuclearSpecies::C13 { a_par: 14e6, gamma_n: GAMMA_C13 });
        let tf = transition_frequencies(&p);
        let split = (tf.line(Branch::Minus1, 0) - tf.line(Branch::Minus1, 1)).abs();
        assert!((split - 14e6).abs() < 1e-3);
    }

    #[test]
    fn splitting_to_field() {
        assert_eq!(field_from_splitting(0.0, GAMMA_E).unwrap(), 0.0);
        let b = field_from_splitting(157.3e6, GAMMA_E).unwrap() / GAUSS;
        assert!((b - 28.066).abs() < 0.01, "{b}");
        let b = field_from_splitting(128.9e6, GAMMA_E).unwrap() / GAUSS;
        assert!((b - 23.0).abs() < 0.01, "{b}");
        assert!(field_from_splitting(-1.0, GAMMA_E).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SpinParams { d: -1.0, ..SpinParams::default() };
        assert!(p.validate().is_err());
        let mut p = SpinParams::default();
        p.b[1] = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn field_solver_hits_requested_lines() {
        let (bz, bt) = field_for_lines(&SpinParams::default(), 2.7917e9, 2.9490e9).unwrap();
        let tf = transition_frequencies(&SpinParams::default().with_field([bt, 0.0, bz]));
        assert!((tf.f_minus - 2.7917e9).abs() < 1e3);
        assert!((tf.f_plus - 2.9490e9).abs() < 1e3);
        assert!(bt > 0.0);
    }
}
