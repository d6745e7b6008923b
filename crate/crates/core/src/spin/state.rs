use nalgebra::{DMatrix, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use super::{Branch, SpinBath, SpinError, C64, LEVEL_MINUS, LEVEL_PLUS, LEVEL_ZERO};

/// Reduced electron density matrix over `m_s = +1, 0, -1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectronSpinState {
    pub rho: Matrix3<C64>,
}

impl ElectronSpinState {
    pub fn pure_level(level: usize) -> Self {
        let mut rho = Matrix3::zeros();
        rho[(level, level)] = C64::new(1.0, 0.0);
        Self { rho }
    }

    pub fn populations(&self) -> [f64; 3] {
        [self.rho[(0, 0)].re, self.rho[(1, 1)].re, self.rho[(2, 2)].re]
    }

    pub fn check(&self) -> Result<(), SpinError> {
        check_density(&DMatrix::from_fn(3, 3, |i, j| self.rho[(i, j)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentPair {
    /// Magnitudes over `{down, up}`.
    pub amplitudes: [f64; 2],
    /// Relative phase of `up` against `down`, rad.
    pub phase: f64,
}

/// Reduced nuclear state: populations by `m_I`, plus the coherent pair when the
/// two projections are phase-related.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearMixture {
    pub probs: Vec<(f64, f64)>,
    pub coherent_pair: Option<CoherentPair>,
}

impl NuclearMixture {
    pub fn none() -> Self {
        Self { probs: vec![(0.0, 1.0)], coherent_pair: None }
    }

    /// Unpolarized spin-1/2.
    pub fn mixed_half() -> Self {
        Self { probs: vec![(-0.5, 0.5), (0.5, 0.5)], coherent_pair: None }
    }

    pub fn down() -> Self {
        Self { probs: vec![(-0.5, 1.0), (0.5, 0.0)], coherent_pair: None }
    }

    pub fn coherent(amplitudes: [f64; 2], phase: f64) -> Self {
        let n = (amplitudes[0].powi(2) + amplitudes[1].powi(2)).sqrt();
        let a = [amplitudes[0] / n, amplitudes[1] / n];
        Self {
            probs: vec![(-0.5, a[0] * a[0]), (0.5, a[1] * a[1])],
            coherent_pair: Some(CoherentPair { amplitudes: a, phase }),
        }
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, m_i: f64) -> f64 {
        self.probs.iter().find(|p| p.0 == m_i).map(|p| p.1).unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<(), SpinError> {
        let total: f64 = self.probs.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-9 || self.probs.iter().any(|p| p.1 < -1e-12) {
            return Err(SpinError::InvalidParams(format!("nuclear probabilities sum to {total}")));
        }
        if let Some(c) = self.coherent_pair {
            let n = c.amplitudes[0].powi(2) + c.amplitudes[1].powi(2);
            if (n - 1.0).abs() > 1e-9 {
                return Err(SpinError::InvalidParams("coherent pair not normalized".into()));
            }
        }
        Ok(())
    }

    fn matrix(&self) -> DMatrix<C64> {
        let n = self.dim();
        match (n, self.coherent_pair) {
            (2, Some(c)) => {
                let v = [C64::new(c.amplitudes[0], 0.0), C64::from_polar(c.amplitudes[1], c.phase)];
                DMatrix::from_fn(2, 2, |i, j| v[i] * v[j].conj())
            }
            _ => DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    C64::new(self.probs[i].1, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        }
    }
}

/// Frame co-rotating with the last applied drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatingFrame {
    pub frequency: f64,
    pub branch: Branch,
}

/// Ensemble dephasing applied when the averaged density matrix is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dephasing {
    /// Gaussian inhomogeneous dephasing time, s. `f64::INFINITY` disables it.
    pub t2_star: f64,
    /// Longitudinal relaxation toward the mixed electron state, s.
    pub t1: Option<f64>,
    pub bath: Option<SpinBath>,
}

impl Default for Dephasing {
    fn default() -> Self {
        Self { t2_star: f64::INFINITY, t1: Some(6e-3), bath: None }
    }
}

impl Dephasing {
    pub fn gaussian(t2_star: f64) -> Self {
        Self { t2_star, t1: None, bath: None }
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        if !(self.t2_star > 0.0) {
            return Err(SpinError::NonPositiveDephasing(self.t2_star));
        }
        if let Some(t1) = self.t1 {
            if !(t1 > 0.0) {
                return Err(SpinError::NonPositiveDephasing(t1));
            }
        }
        if let Some(b) = &self.bath {
            b.validate()?;
        }
        Ok(())
    }

    pub(crate) fn attenuation(&self, c: &Component) -> f64 {
        let mut exponent = 0.0;
        if self.t2_star.is_finite() {
            exponent += (c.s / self.t2_star).powi(2);
        }
        if let Some(b) = &self.bath {
            let (cz, cy) = b.coefficients();
            exponent += cz * c.z.norm_sqr() + cy * c.y * c.y;
        }
        (-exponent).exp()
    }
}

/// One term of the noise-averaged state. For a given noise realization the
/// density matrix is `Σ M_k exp(i θ_k)`, with `θ_k` linear in the noise and
/// set by the accumulated lags `s`, `z` and `y`.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    /// Accumulated static lag, s.
    pub s: f64,
    /// Lag against the oscillating bath field, s.
    pub z: C64,
    /// Lag against the linear drift field, s².
    pub y: f64,
    pub m: DMatrix<C64>,
}

impl Component {
    fn same_tags(&self, other: &Component) -> bool {
        fn close(a: f64, b: f64, scale: f64) -> bool {
            (a - b).abs() <= 1e-12 * (a.abs() + b.abs()) + scale
        }
        close(self.s, other.s, 1e-20)
            && close(self.z.re, other.z.re, 1e-20)
            && close(self.z.im, other.z.im, 1e-20)
            && close(self.y, other.y, 1e-30)
    }
}

/// Joint electron-nuclear state tracked as a set of dephasing-tagged
/// components so that echoes refocus exactly.
#[derive(Debug, Clone)]
pub struct SpinState {
    pub(crate) nuclear_dim: usize,
    pub(crate) components: Vec<Component>,
    pub(crate) frame: Option<RotatingFrame>,
    pub(crate) dephasing: Dephasing,
    /// Time since the last optical reset, s.
    pub(crate) clock: f64,
}

pub(crate) const MAX_COMPONENTS: usize = 2048;

impl SpinState {
    pub fn new(electron: &ElectronSpinState, nuclear: &NuclearMixture) -> Self {
        let n = nuclear.dim();
        let nm = nuclear.matrix();
        let m = DMatrix::from_fn(3 * n, 3 * n, |a, b| electron.rho[(a / n, b / n)] * nm[(a % n, b % n)]);
        Self::from_matrix(n, m)
    }

    pub(crate) fn from_matrix(nuclear_dim: usize, m: DMatrix<C64>) -> Self {
        Self {
            nuclear_dim,
            components: vec![Component { s: 0.0, z: C64::new(0.0, 0.0), y: 0.0, m }],
            frame: None,
            dephasing: Dephasing::default(),
            clock: 0.0,
        }
    }

    /// Incoherent state with one `[+1, 0, -1]` population triple per nuclear
    /// projection.
    pub fn from_populations(pops: &[[f64; 3]], nuclear_dim: usize) -> Self {
        let d = 3 * nuclear_dim;
        let mut m = DMatrix::zeros(d, d);
        for (j, p) in pops.iter().enumerate().take(nuclear_dim) {
            for level in 0..3 {
                m[(level * nuclear_dim + j, level * nuclear_dim + j)] = C64::new(p[level], 0.0);
            }
        }
        Self::from_matrix(nuclear_dim, m)
    }

    /// Electron in `|0>`, nuclear spin unpolarized.
    pub fn ground(nuclear_dim: usize) -> Self {
        let nuc = if nuclear_dim == 1 { NuclearMixture::none() } else { NuclearMixture::mixed_half() };
        Self::new(&ElectronSpinState::pure_level(LEVEL_ZERO), &nuc)
    }

    pub fn nuclear_dim(&self) -> usize {
        self.nuclear_dim
    }

    pub fn dim(&self) -> usize {
        3 * self.nuclear_dim
    }

    pub fn index(&self, level: usize, nuclear: usize) -> usize {
        level * self.nuclear_dim + nuclear
    }

    pub fn frame(&self) -> Option<RotatingFrame> {
        self.frame
    }

    pub fn set_frame(&mut self, frame: RotatingFrame) {
        self.frame = Some(frame);
    }

    pub fn dephasing(&self) -> &Dephasing {
        &self.dephasing
    }

    pub fn set_dephasing(&mut self, d: Dephasing) {
        self.dephasing = d;
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Noise-averaged joint density matrix.
    pub fn rho(&self) -> DMatrix<C64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for c in &self.components {
            let w = self.dephasing.attenuation(c);
            if w > 0.0 {
                out += &c.m * C64::new(w, 0.0);
            }
        }
        out
    }

    pub fn electron(&self) -> ElectronSpinState {
        let rho = self.rho();
        let n = self.nuclear_dim;
        let mut e = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                e[(a, b)] = (0..n).map(|j| rho[(a * n + j, b * n + j)]).sum();
            }
        }
        ElectronSpinState { rho: e }
    }

    /// Reduced nuclear state, optionally conditioned on an electron level.
    pub fn nuclear(&self, electron_level: Option<usize>) -> NuclearMixture {
        let n = self.nuclear_dim;
        if n == 1 {
            return NuclearMixture::none();
        }
        let rho = self.rho();
        let levels: Vec<usize> = match electron_level {
            Some(l) => vec![l],
            None => vec![0, 1, 2],
        };
        let mut r = Matrix2::<C64>::zeros();
        for &l in &levels {
            for i in 0..2 {
                for j in 0..2 {
                    r[(i, j)] += rho[(l * n + i, l * n + j)];
                }
            }
        }
        let tr = (r[(0, 0)] + r[(1, 1)]).re;
        if tr <= 0.0 {
            return NuclearMixture::mixed_half();
        }
        let (p0, p1) = (r[(0, 0)].re / tr, r[(1, 1)].re / tr);
        let off = r[(1, 0)] / tr;
        let coherent_pair = (off.norm() > 1e-12).then(|| CoherentPair {
            amplitudes: [p0.max(0.0).sqrt(), p1.max(0.0).sqrt()],
            phase: off.arg(),
        });
        NuclearMixture { probs: vec![(-0.5, p0), (0.5, p1)], coherent_pair }
    }

    /// Populations indexed `[nuclear][level]` with levels `+1, 0, -1`.
    pub fn populations(&self) -> Vec<[f64; 3]> {
        let rho = self.rho();
        let n = self.nuclear_dim;
        (0..n)
            .map(|j| [0, 1, 2].map(|l| rho[(l * n + j, l * n + j)].re))
            .collect()
    }

    /// Probability of the electron being in `|0>`.
    pub fn p_zero(&self) -> f64 {
        self.electron().populations()[LEVEL_ZERO]
    }

    /// Probability in `|±1>` summed.
    pub fn p_bright_loss(&self) -> f64 {
        let p = self.electron().populations();
        p[LEVEL_PLUS] + p[LEVEL_MINUS]
    }

    pub fn trace(&self) -> f64 {
        self.rho().trace().re
    }

    pub fn check(&self) -> Result<(), SpinError> {
        check_density(&self.rho())
    }

    /// Merges components with equal lags and drops empty ones.
    pub(crate) fn compact(&mut self) {
        let mut merged: Vec<Component> = Vec::with_capacity(self.components.len());
        for c in self.components.drain(..) {
            if let Some(slot) = merged.iter_mut().find(|m| m.same_tags(&c)) {
                slot.m += &c.m;
            } else {
                merged.push(c);
            }
        }
        // Attenuation is not a pruning criterion: a later echo can undo it.
        merged.retain(|c| c.m.iter().any(|v| v.norm() > 1e-15));
        let deph = self.dephasing;
        if merged.len() > MAX_COMPONENTS {
            merged.sort_by(|a, b| {
                let wa = deph.attenuation(a) * a.m.norm();
                let wb = deph.attenuation(b) * b.m.norm();
                wb.total_cmp(&wa)
            });
            merged.truncate(MAX_COMPONENTS);
        }
        if merged.is_empty() {
            let d = self.dim();
            merged.push(Component { s: 0.0, z: C64::new(0.0, 0.0), y: 0.0, m: DMatrix::zeros(d, d) });
        }
        self.components = merged;
    }

    /// Distance between averaged states (Frobenius).
    pub fn distance(&self, other: &SpinState) -> f64 {
        (self.rho() - other.rho()).norm()
    }
}

pub(crate) fn check_density(rho: &DMatrix<C64>) -> Result<(), SpinError> {
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
        return Err(SpinError::InvalidParams(format!("trace {tr}")));
    }
    let herm = (rho - rho.adjoint()).norm();
    if herm > 1e-9 {
        return Err(SpinError::InvalidParams(format!("not hermitian ({herm:e})")));
    }
    let sym = (rho + rho.adjoint()) * C64::new(0.5, 0.0);
    let min = nalgebra::SymmetricEigen::new(sym).eigenvalues.min();
    if min < -1e-9 {
        return Err(SpinError::InvalidParams(format!("negative eigenvalue {min:e}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_state_has_unit_trace() {
        let s = SpinState::new(&ElectronSpinState::pure_level(LEVEL_ZERO), &NuclearMixture::coherent([1.0, 1.0], 0.3));
        s.check().unwrap();
        assert_eq!(s.dim(), 6);
        let nuc = s.nuclear(None);
        assert!((nuc.prob(0.5) - 0.5).abs() < 1e-12);
        let pair = nuc.coherent_pair.unwrap();
        assert!((pair.phase - 0.3).abs() < 1e-12);
    }

    #[test]
    fn populations_round_trip() {
        let s = SpinState::from_populations(&[[0.1, 0.6, 0.0], [0.1, 0.1, 0.1]], 2);
        let p = s.populations();
        assert!((p[1][2] - 0.1).abs() < 1e-15);
        assert!((s.p_zero() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bad_nuclear_mixture_rejected() {
        let m = NuclearMixture { probs: vec![(-0.5, 0.7), (0.5, 0.7)], coherent_pair: None };
        assert!(m.check().is_err());
    }
}
