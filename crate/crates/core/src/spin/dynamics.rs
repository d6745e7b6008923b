use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use super::state::Component;
use super::{
    transition_frequencies, Branch, Dephasing, RotatingFrame, SpinError, SpinParams, SpinState,
    TransitionFrequencies, C64, LEVEL_ZERO,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwDrive {
    pub frequency: f64,
    /// Ω/2π, Hz.
    pub rabi_frequency: f64,
    pub phase: f64,
    pub target_branch: Branch,
}

impl MwDrive {
    pub fn resonant(params: &SpinParams, branch: Branch, rabi_frequency: f64) -> Self {
        let tf = transition_frequencies(params);
        Self { frequency: tf.branch(branch), rabi_frequency, phase: 0.0, target_branch: branch }
    }

    pub fn frame(&self) -> RotatingFrame {
        RotatingFrame { frequency: self.frequency, branch: self.target_branch }
    }
}

const MS: [f64; 3] = [1.0, 0.0, -1.0];

/// Coupling of each level to a longitudinal noise field, in units of the
/// target-branch shift.
fn noise_weight(level: usize, branch: Branch) -> f64 {
    MS[level] * branch.ms()
}

fn default_frame(tf: &TransitionFrequencies) -> RotatingFrame {
    RotatingFrame { frequency: tf.f_minus, branch: Branch::Minus1 }
}

/// Rotating-frame energies (Hz) for each joint index.
fn level_energies(tf: &TransitionFrequencies, frame: RotatingFrame, n: usize) -> Vec<f64> {
    let mut e = vec![0.0; 3 * n];
    let target = frame.branch.level();
    let spectator = frame.branch.other();
    for j in 0..n {
        e[target * n + j] = tf.line(frame.branch, j) - frame.frequency;
        e[spectator.level() * n + j] = tf.line(spectator, j);
    }
    e
}

/// Closed-form transfer probability `|0> -> |±1>` for a square pulse.
pub fn pulse_transfer_probability(rabi: f64, detuning: f64, duration: f64) -> f64 {
    let eff2 = rabi * rabi + detuning * detuning;
    if eff2 == 0.0 {
        return 0.0;
    }
    rabi * rabi / eff2 * (PI * eff2.sqrt() * duration).sin().powi(2)
}

/// Propagator of a square drive in the rotating frame over the joint space.
///
/// Each nuclear sector sees its own detuning `f_drive - f_line(m_I)` plus
/// `extra_detuning`; the undriven branch only accumulates its phase.
pub fn rabi_unitary(
    drive: &MwDrive,
    params: &SpinParams,
    duration: f64,
    extra_detuning: f64,
) -> DMatrix<C64> {
    let tf = transition_frequencies(params);
    rabi_unitary_with(&tf, drive, params.nuclear.dim(), duration, extra_detuning)
}

fn rabi_unitary_with(
    tf: &TransitionFrequencies,
    drive: &MwDrive,
    n: usize,
    duration: f64,
    extra_detuning: f64,
) -> DMatrix<C64> {
    let frame = drive.frame();
    let energies = level_energies(tf, frame, n);
    let mut u = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        3 * n,
        energies.iter().map(|&e| C64::from_polar(1.0, -2.0 * PI * e * duration)),
    ));
    let t_lvl = frame.branch.level();
    let omega = drive.rabi_frequency;
    for j in 0..n {
        let a = LEVEL_ZERO * n + j;
        let b = t_lvl * n + j;
        let delta = drive.frequency - tf.line(frame.branch, j) + extra_detuning;
        let eff = omega.hypot(delta);
        let global = C64::from_polar(1.0, PI * delta * duration);
        let (cos, sin) = if eff > 0.0 {
            let th = PI * eff * duration;
            (th.cos(), th.sin())
        } else {
            (1.0, 0.0)
        };
        let (nx, ny, nz) = if eff > 0.0 {
            (omega * drive.phase.cos() / eff, omega * drive.phase.sin() / eff, delta / eff)
        } else {
            (0.0, 0.0, 0.0)
        };
        let i = C64::new(0.0, 1.0);
        u[(a, a)] = global * (C64::new(cos, 0.0) - i * sin * nz);
        u[(b, b)] = global * (C64::new(cos, 0.0) + i * sin * nz);
        u[(a, b)] = global * (-i * sin * C64::new(nx, -ny));
        u[(b, a)] = global * (-i * sin * C64::new(nx, ny));
    }
    u
}

fn conjugate(state: &mut SpinState, u: &DMatrix<C64>) {
    let ua = u.adjoint();
    for c in &mut state.components {
        c.m = u * &c.m * &ua;
    }
}

fn check_drive(drive: &MwDrive, duration: f64) -> Result<(), SpinError> {
    if duration < 0.0 || !duration.is_finite() {
        return Err(SpinError::NegativeDuration(duration));
    }
    if drive.rabi_frequency < 0.0 || !drive.rabi_frequency.is_finite() {
        return Err(SpinError::NegativeRabi(drive.rabi_frequency));
    }
    Ok(())
}

/// Coherent square pulse. Sets the state's rotating frame to the drive.
pub fn apply_mw_pulse(
    state: &mut SpinState,
    drive: &MwDrive,
    duration: f64,
    params: &SpinParams,
) -> Result<(), SpinError> {
    check_drive(drive, duration)?;
    let tf = transition_frequencies(params);
    let u = rabi_unitary_with(&tf, drive, state.nuclear_dim, duration, 0.0);
    conjugate(state, &u);
    state.frame = Some(drive.frame());
    state.clock += duration;
    Ok(())
}

/// Nodes and weights for expectations over a standard normal variable.
pub(crate) fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn gh7() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_hermite(7))
}

/// Square pulse averaged over the quasi-static detuning spread set by the
/// state's `T2*`. Reduces to [`apply_mw_pulse`] when `T2*` is infinite.
pub fn apply_mw_pulse_inhomogeneous(
    state: &mut SpinState,
    drive: &MwDrive,
    duration: f64,
    params: &SpinParams,
) -> Result<(), SpinError> {
    let t2 = state.dephasing.t2_star;
    if !t2.is_finite() {
        return apply_mw_pulse(state, drive, duration, params);
    }
    check_drive(drive, duration)?;
    let sigma = 1.0 / (std::f64::consts::SQRT_2 * PI * t2);
    let tf = transition_frequencies(params);
    let (nodes, weights) = gh7();
    let us: Vec<_> = nodes
        .iter()
        .map(|&x| rabi_unitary_with(&tf, drive, state.nuclear_dim, duration, x * sigma))
        .collect();
    for c in &mut state.components {
        let mut acc = DMatrix::zeros(c.m.nrows(), c.m.ncols());
        for (u, &w) in us.iter().zip(weights) {
            acc += (u * &c.m * u.adjoint()) * C64::new(w, 0.0);
        }
        c.m = acc;
    }
    state.frame = Some(drive.frame());
    state.clock += duration;
    Ok(())
}

/// Free evolution in the current rotating frame.
///
/// Coherences pick up their deterministic detuning phase and the noise lags
/// that the averaged state turns into Gaussian `T2*` decay and bath decay.
/// Populations relax toward the mixed electron state when `T1` is set.
pub fn free_evolve(
    state: &mut SpinState,
    duration: f64,
    params: &SpinParams,
    dephasing: &Dephasing,
) -> Result<(), SpinError> {
    if duration < 0.0 || !duration.is_finite() {
        return Err(SpinError::NegativeDuration(duration));
    }
    dephasing.validate()?;
    state.dephasing = *dephasing;
    if duration == 0.0 {
        return Ok(());
    }
    let tf = transition_frequencies(params);
    let n = state.nuclear_dim;
    let frame = state.frame.unwrap_or_else(|| default_frame(&tf));
    let energies = level_energies(&tf, frame, n);
    let weight: Vec<f64> = (0..3 * n).map(|a| noise_weight(a / n, frame.branch)).collect();

    let t0 = state.clock;
    let omega = dephasing.bath.map(|b| b.omega()).unwrap_or(0.0);
    let z_step = if omega > 0.0 {
        let half = 0.5 * omega * duration;
        C64::from_polar(2.0 * half.sin() / omega, omega * t0 + half) - duration
    } else {
        C64::new(0.0, 0.0)
    };
    let y_step = duration * (2.0 * t0 + duration) / 2.0;

    let d = 3 * n;
    let mut out = Vec::with_capacity(state.components.len() * 3);
    for c in &state.components {
        for dn in [-2i32, -1, 0, 1, 2] {
            let mut m = DMatrix::zeros(d, d);
            let mut any = false;
            for a in 0..d {
                for b in 0..d {
                    if (weight[a] - weight[b]).round() as i32 != dn {
                        continue;
                    }
                    let v = c.m[(a, b)];
                    if v.norm() == 0.0 {
                        continue;
                    }
                    let ph = -2.0 * PI * (energies[a] - energies[b]) * duration;
                    m[(a, b)] = v * C64::from_polar(1.0, ph);
                    any = true;
                }
            }
            if any {
                let k = dn as f64;
                out.push(Component { s: c.s + k * duration, z: c.z + z_step * k, y: c.y + k * y_step, m });
            }
        }
    }
    if let Some(t1) = dephasing.t1 {
        let keep = (-duration / t1).exp();
        for c in &mut out {
            let mut reduced = DMatrix::<C64>::zeros(n, n);
            for l in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        reduced[(i, j)] += c.m[(l * n + i, l * n + j)];
                    }
                }
            }
            c.m *= C64::new(keep, 0.0);
            let feed = (1.0 - keep) / 3.0;
            for l in 0..3 {
                for i in 0..n {
                    for j in 0..n {
                        c.m[(l * n + i, l * n + j)] += reduced[(i, j)] * feed;
                    }
                }
            }
        }
    }
    state.components = out;
    state.clock += duration;
    state.compact();
    Ok(())
}

/// Nuclear precession about x at `omega_l` (Hz) inside the electron `|0>`
/// sector. Other sectors are frozen by the large hyperfine splitting. Does not
/// advance the state clock; pair it with [`free_evolve`] over the same window.
pub fn nuclear_precess(state: &mut SpinState, duration: f64, omega_l: f64) -> Result<(), SpinError> {
    nuclear_precess_about(state, duration, omega_l, [1.0, 0.0, 0.0])
}

/// As [`nuclear_precess`] about an arbitrary axis in the NV frame.
pub fn nuclear_precess_about(
    state: &mut SpinState,
    duration: f64,
    omega_l: f64,
    axis: [f64; 3],
) -> Result<(), SpinError> {
    if omega_l < 0.0 || !omega_l.is_finite() {
        return Err(SpinError::NegativeLarmor(omega_l));
    }
    if duration < 0.0 || !duration.is_finite() {
        return Err(SpinError::NegativeDuration(duration));
    }
    if state.nuclear_dim != 2 || duration == 0.0 || omega_l == 0.0 {
        return Ok(());
    }
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if norm == 0.0 {
        return Err(SpinError::InvalidParams("zero precession axis".into()));
    }
    let (nx, ny, nz) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
    let th = PI * omega_l * duration;
    let (c, s) = (th.cos(), th.sin());
    let i = C64::new(0.0, 1.0);
    // Nuclear index 0 is down (m_I = -1/2), so σz = diag(-1, +1) here.
    let r = [
        [C64::new(c, 0.0) + i * s * nz, -i * s * C64::new(nx, -ny)],
        [-i * s * C64::new(nx, ny), C64::new(c, 0.0) - i * s * nz],
    ];
    let mut u = DMatrix::<C64>::identity(6, 6);
    let base = LEVEL_ZERO * 2;
    for a in 0..2 {
        for b in 0..2 {
            u[(base + a, base + b)] = r[a][b];
        }
    }
    conjugate(state, &u);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{ElectronSpinState, NuclearMixture, NuclearSpecies, SpinBath, GAUSS, LEVEL_MINUS};

    fn params() -> SpinParams {
        SpinParams::default().with_field([0.0, 0.0, 28.0 * GAUSS])
    }

    fn ground() -> SpinState {
        SpinState::ground(1)
    }

    #[test]
    fn resonant_pi_pulse_flips() {
        let p = params();
        let drive = MwDrive::resonant(&p, Branch::Minus1, 13.16e6);
        let mut s = ground();
        apply_mw_pulse(&mut s, &drive, 1.0 / (2.0 * 13.16e6), &p).unwrap();
        assert!((s.electron().populations()[LEVEL_MINUS] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thirty_eight_ns_pi_pulse() {
        let p = params();
        let rabi = 1.0 / (2.0 * 38e-9);
        let drive = MwDrive::resonant(&p, Branch::Minus1, rabi);
        let mut s = ground();
        apply_mw_pulse(&mut s, &drive, 38e-9, &p).unwrap();
        assert!(s.p_zero() < 1e-12);
    }

    #[test]
    fn detuned_drive_caps_transfer_at_half() {
        let p = params();
        let rabi = 5e6;
        let mut drive = MwDrive::resonant(&p, Branch::Minus1, rabi);
        drive.frequency += rabi;
        let t = 1.0 / (2.0 * std::f64::consts::SQRT_2 * rabi);
        let mut s = ground();
        apply_mw_pulse(&mut s, &drive, t, &p).unwrap();
        assert!((s.electron().populations()[LEVEL_MINUS] - 0.5).abs() < 1e-9);
        assert!((pulse_transfer_probability(rabi, rabi, t) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ramsey_single_tone_phase() {
        let p = params();
        let delta = 2e6;
        let mut drive = MwDrive::resonant(&p, Branch::Minus1, 20e6);
        drive.frequency += delta;
        let e = ElectronSpinState {
            rho: nalgebra::Matrix3::from_fn(|a, b| {
                if a > 0 && b > 0 {
                    C64::new(0.5, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        };
        let mut s = SpinState::new(&e, &NuclearMixture::none());
        s.set_frame(drive.frame());
        free_evolve(&mut s, 1.0 / (2.0 * delta), &p, &Dephasing::gaussian(f64::INFINITY)).unwrap();
        let coh = s.electron().rho[(1, 2)];
        assert!((coh.arg().abs() - PI).abs() < 1e-9, "{coh}");
    }

    #[test]
    fn zero_duration_is_identity() {
        let p = params();
        let drive = MwDrive::resonant(&p, Branch::Minus1, 10e6);
        let mut s = ground();
        apply_mw_pulse(&mut s, &drive, 0.3 / 10e6, &p).unwrap();
        let before = s.clone();
        free_evolve(&mut s, 0.0, &p, &Dephasing::gaussian(1e-6)).unwrap();
        nuclear_precess(&mut s, 0.0, 1e5).unwrap();
        assert!(s.distance(&before) < 1e-15);
    }

    #[test]
    fn negative_inputs_rejected() {
        let p = params();
        let mut s = ground();
        assert!(free_evolve(&mut s, 1e-6, &p, &Dephasing::gaussian(0.0)).is_err());
        assert!(free_evolve(&mut s, -1e-6, &p, &Dephasing::gaussian(1e-6)).is_err());
        assert!(nuclear_precess(&mut s, 1e-6, -1.0).is_err());
        let mut d = MwDrive::resonant(&p, Branch::Minus1, 1e6);
        d.rabi_frequency = -1.0;
        assert!(apply_mw_pulse(&mut s, &d, 1e-6, &p).is_err());
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(7);
        let m = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-10);
        assert!((m(6) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn pi_l_flips_nuclear_spin() {
        let f_l = 85e3;
        let mut s = SpinState::new(&ElectronSpinState::pure_level(LEVEL_ZERO), &NuclearMixture::down());
        nuclear_precess(&mut s, 1.0 / (2.0 * f_l), f_l).unwrap();
        assert!((s.nuclear(None).prob(0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nuclear_precession_frozen_outside_zero_sector() {
        let mut s = SpinState::new(&ElectronSpinState::pure_level(LEVEL_MINUS), &NuclearMixture::down());
        nuclear_precess(&mut s, 3e-6, 85e3).unwrap();
        assert!((s.nuclear(None).prob(-0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hahn_sequence_refocuses_static_detuning() {
        let p = params().with_nuclear(NuclearSpecies::None);
        let drive = MwDrive::resonant(&p, Branch::Minus1, 50e6);
        let half = 0.25 / 50e6;
        let deph = Dephasing { t2_star: 1e-6, t1: None, bath: None };
        let mut s = ground();
        apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
        free_evolve(&mut s, 5e-6, &p, &deph).unwrap();
        apply_mw_pulse(&mut s, &drive, 2.0 * half, &p).unwrap();
        free_evolve(&mut s, 5e-6, &p, &deph).unwrap();
        apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
        // Full refocus despite τ ≫ T2*: 2π of total rotation returns to |0>.
        assert!((s.p_zero() - 1.0).abs() < 1e-9, "{}", s.p_zero());
        let mut r = ground();
        apply_mw_pulse(&mut r, &drive, half, &p).unwrap();
        free_evolve(&mut r, 5e-6, &p, &deph).unwrap();
        apply_mw_pulse(&mut r, &drive, half, &p).unwrap();
        assert!((r.p_zero() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn echo_matches_closed_form_bath() {
        let p = params();
        let bath = SpinBath { tc: 10.7e-6, larmor: 24.6e3, revival_depth: 0.8 };
        let deph = Dephasing { t2_star: 1.5e-6, t1: None, bath: Some(bath) };
        // Near-instant pulses so the two windows are symmetric.
        let drive = MwDrive::resonant(&p, Branch::Minus1, 1e12);
        let half = 0.25e-12;
        for tau in [1e-6, 4e-6, 6e-6, 20e-6, 40.6e-6] {
            let mut s = ground();
            s.set_dephasing(deph);
            s.clock = 3.7e-6;
            apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
            free_evolve(&mut s, tau, &p, &deph).unwrap();
            apply_mw_pulse(&mut s, &drive, 2.0 * half, &p).unwrap();
            free_evolve(&mut s, tau, &p, &deph).unwrap();
            apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
            let coherence = 2.0 * s.p_zero() - 1.0;
            let expected = super::super::hahn_echo_response(tau, &bath).unwrap();
            assert!((coherence - expected).abs() < 1e-6, "tau {tau}: {coherence} vs {expected}");
        }
    }

    #[test]
    fn echo_revives_after_full_dephasing() {
        // Halfway through, the coherence is far below any pruning threshold.
        let p = params();
        let bath = SpinBath { tc: 10.7e-6, larmor: 24.6e3, revival_depth: 1.0 };
        let deph = Dephasing { t2_star: 1.5e-6, t1: None, bath: Some(bath) };
        let drive = MwDrive::resonant(&p, Branch::Minus1, 1e12);
        let half = 0.25e-12;
        let tau = 1.0 / 24.6e3;
        let mut s = ground();
        s.set_dephasing(deph);
        apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
        free_evolve(&mut s, tau, &p, &deph).unwrap();
        apply_mw_pulse(&mut s, &drive, 2.0 * half, &p).unwrap();
        free_evolve(&mut s, tau, &p, &deph).unwrap();
        apply_mw_pulse(&mut s, &drive, half, &p).unwrap();
        let expected = super::super::hahn_echo_response(tau, &bath).unwrap();
        assert!(expected > 0.99);
        assert!((2.0 * s.p_zero() - 1.0 - expected).abs() < 1e-6);
    }

    #[test]
    fn t1_relaxes_toward_mixed() {
        let p = params();
        let mut s = ground();
        let deph = Dephasing { t2_star: f64::INFINITY, t1: Some(1e-3), bath: None };
        free_evolve(&mut s, 20e-3, &p, &deph).unwrap();
        let pops = s.electron().populations();
        for v in pops {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }
}
