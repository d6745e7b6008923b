//! Checks shared by the acceptance run and the property suites. Each one
//! returns a summary on success and a description of the first violation
//! otherwise, so callers can either print or assert.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Complex, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use nvlab_core::analysis::{fit, ModelKind};
use nvlab_core::apparatus::dead_time_filter;
use nvlab_core::pulse::{compile, BackendProfile, ChannelId, DelayCalibration, Interval, SequenceIR};
use nvlab_core::rng::{label, rng_for, SimRng};
use nvlab_core::spin::{
    apply_mw_pulse, apply_mw_pulse_inhomogeneous, free_evolve, nuclear_precess_about, pulse_transfer_probability,
    transition_frequencies, Branch, Dephasing, MwDrive, NuclearSpecies, SpinBath, SpinParams, SpinState, GAMMA_C13,
    GAUSS, LEVEL_MINUS, LEVEL_ZERO,
};

type C64 = Complex<f64>;

pub fn random_params(rng: &mut SimRng) -> SpinParams {
    let b = [rng.random_range(-20.0..20.0) * GAUSS, 0.0, rng.random_range(0.0..200.0) * GAUSS];
    let nuclear = match rng.random_range(0..3) {
        0 => NuclearSpecies::None,
        1 => NuclearSpecies::N15 { a_par: 3.03e6 },
        _ => NuclearSpecies::C13 { a_par: 14e6, gamma_n: GAMMA_C13 },
    };
    SpinParams::default().with_field(b).with_nuclear(nuclear)
}

fn random_dephasing(rng: &mut SimRng) -> Dephasing {
    let bath = rng.random_bool(0.5).then(|| SpinBath {
        tc: rng.random_range(2e-6..50e-6),
        larmor: rng.random_range(0.0..1e5),
        revival_depth: rng.random_range(0.0..=1.0),
    });
    let t1 = rng.random_bool(0.5).then(|| rng.random_range(1e-5..1e-2));
    Dephasing { t2_star: rng.random_range(0.3e-6..20e-6), t1, bath }
}

fn random_state(rng: &mut SimRng, n: usize) -> SpinState {
    let raw: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
    let total: f64 = raw.iter().flatten().sum();
    let pops: Vec<[f64; 3]> = raw.iter().map(|p| p.map(|v| v / total)).collect();
    SpinState::from_populations(&pops, n)
}

/// Applies `sequences` random operation chains and checks after each step
/// that the averaged state is a density matrix.
pub fn spin_invariants(sequences: usize, seed: u64) -> Result<String, String> {
    let mut steps = 0;
    for k in 0..sequences {
        let mut rng = rng_for(seed, &[label("spin-invariants"), k as u64]);
        let p = random_params(&mut rng);
        let tf = transition_frequencies(&p);
        let deph = random_dephasing(&mut rng);
        let mut s = random_state(&mut rng, p.nuclear.dim());
        s.set_dephasing(deph);
        for _ in 0..rng.random_range(1..6) {
            let op = rng.random_range(0..3);
            let r = match op {
                0 => {
                    let branch = if rng.random_bool(0.5) { Branch::Minus1 } else { Branch::Plus1 };
                    let drive = MwDrive {
                        frequency: tf.branch(branch) + rng.random_range(-20e6..20e6),
                        rabi_frequency: rng.random_range(0.0..30e6),
                        phase: rng.random_range(0.0..2.0 * PI),
                        target_branch: branch,
                    };
                    apply_mw_pulse_inhomogeneous(&mut s, &drive, rng.random_range(0.0..300e-9), &p)
                }
                1 => free_evolve(&mut s, rng.random_range(0.0..30e-6), &p, &deph),
                _ => {
                    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0];
                    nuclear_precess_about(&mut s, rng.random_range(0.0..20e-6), rng.random_range(0.0..2e5), axis)
                }
            };
            r.map_err(|e| format!("sequence {k}: operation {op} failed: {e}"))?;
            s.check().map_err(|e| format!("sequence {k} after operation {op}: {e}"))?;
            let pops = s.populations();
            if pops.iter().flatten().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
                return Err(format!("sequence {k}: population outside [0, 1]: {pops:?}"));
            }
            steps += 1;
        }
    }
    Ok(format!("{sequences} sequences, {steps} operations"))
}

/// `|ψ(t)>` under the rotating-frame Hamiltonian of a drive on the −1 branch,
/// integrated with fixed-step RK4. Level order `[+1, 0, −1]`.
fn propagate_three_level(rabi: f64, detuning: f64, plus_offset: f64, duration: f64) -> Vector3<C64> {
    let i = C64::new(0.0, 1.0);
    let w = 2.0 * PI;
    let h = Matrix3::new(
        C64::new(w * plus_offset, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.5 * w * rabi, 0.0),
        C64::new(0.0, 0.0),
        C64::new(0.5 * w * rabi, 0.0),
        C64::new(-w * detuning, 0.0),
    );
    let a = h * (-i);
    let steps = 4000;
    let dt = duration / steps as f64;
    let mut psi = Vector3::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0));
    for _ in 0..steps {
        let k1 = a * psi;
        let k2 = a * (psi + k1 * C64::new(0.5 * dt, 0.0));
        let k3 = a * (psi + k2 * C64::new(0.5 * dt, 0.0));
        let k4 = a * (psi + k3 * C64::new(dt, 0.0));
        psi += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
    }
    psi
}

/// Largest gap between the generalized Rabi formula, the library pulse and
/// a direct numerical propagation of the three-level Hamiltonian.
pub fn rabi_closed_form(cases: usize, seed: u64) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let mut rng = rng_for(seed, &[label("rabi-closed-form"), k as u64]);
        let p = SpinParams::default().with_field([0.0, 0.0, rng.random_range(0.0..100.0) * GAUSS]);
        let tf = transition_frequencies(&p);
        let rabi = rng.random_range(0.5e6..20e6);
        let detuning = rng.random_range(-10e6..10e6);
        let duration = rng.random_range(0.0..400e-9);
        let psi = propagate_three_level(rabi, detuning, tf.f_plus, duration);
        let numeric = psi[2].norm_sqr();
        let closed = pulse_transfer_probability(rabi, detuning, duration);
        let drive = MwDrive { frequency: tf.f_minus + detuning, rabi_frequency: rabi, phase: 0.0, target_branch: Branch::Minus1 };
        let mut s = SpinState::ground(1);
        apply_mw_pulse(&mut s, &drive, duration, &p).map_err(|e| e.to_string())?;
        let library = s.populations()[0][LEVEL_MINUS];
        let err = (numeric - closed).abs().max((numeric - library).abs());
        if err > 1e-6 {
            return Err(format!(
                "Ω {rabi:e} Δ {detuning:e} t {duration:e}: numeric {numeric}, closed {closed}, library {library}"
            ));
        }
        if (s.populations()[0][LEVEL_ZERO] + library - 1.0).abs() > 1e-9 {
            return Err("population leaked out of the driven pair".into());
        }
        worst = worst.max(err);
    }
    Ok(format!("{cases} cases, max |ΔP| = {worst:.1e}"))
}

/// A plausible parameter vector, x grid and noise-free curve for each model.
pub fn model_case(kind: ModelKind, rng: &mut SimRng) -> (Vec<f64>, Vec<f64>) {
    let u = |rng: &mut SimRng, lo: f64, hi: f64| rng.random_range(lo..hi);
    match kind {
        ModelKind::Linear => ((0..40).map(|i| i as f64 * 0.25).collect(), vec![u(rng, -2.0, 2.0), u(rng, 0.5, 2.0)]),
        ModelKind::GaussianPeak => (
            (0..61).map(|i| -1.0 + i as f64 / 30.0).collect(),
            vec![u(rng, 0.5, 1.5), u(rng, -0.2, 0.2), u(rng, 0.12, 0.25), u(rng, 0.1, 0.4)],
        ),
        ModelKind::DoubleLorentzian => {
            let c1 = 2.79e9 + u(rng, -5e6, 5e6);
            let c2 = 2.95e9 + u(rng, -5e6, 5e6);
            (
                (0..161).map(|i| 2.75e9 + i as f64 * 1.5e6).collect(),
                vec![1.0, u(rng, 0.1, 0.2), c1, u(rng, 3e6, 6e6), u(rng, 0.1, 0.2), c2, u(rng, 3e6, 6e6)],
            )
        }
        ModelKind::Rabi => (
            (0..101).map(|i| i as f64 * 2e-9).collect(),
            vec![u(rng, 0.1, 0.2), 2.0 * PI * u(rng, 8e6, 20e6), u(rng, 0.0, 2.0 * PI), 1.0],
        ),
        ModelKind::NuclearPrecession => (
            (0..101).map(|i| i as f64 * 0.4e-6).collect(),
            vec![u(rng, 0.05, 0.15), u(rng, 50e3, 150e3), u(rng, 0.0, 2.0 * PI), 1.0],
        ),
        ModelKind::RamseyTwoTone => (
            (0..201).map(|i| i as f64 * 10e-9).collect(),
            vec![
                u(rng, 0.1, 0.2),
                u(rng, 6.5e6, 8e6),
                u(rng, 0.0, 2.0 * PI),
                u(rng, 0.1, 0.2),
                u(rng, 3.5e6, 5e6),
                u(rng, 0.0, 2.0 * PI),
                u(rng, 1.2e-6, 2.5e-6),
                1.0,
            ],
        ),
        ModelKind::HahnEnvelope => {
            ((0..61).map(|i| i as f64 * 0.4e-6).collect(), vec![u(rng, 0.1, 0.3), u(rng, 8e-6, 14e-6), 1.0])
        }
        ModelKind::G2 => (
            (0..401).map(|i| -100e-9 + i as f64 * 0.5e-9).collect(),
            vec![u(rng, 0.85, 0.98), u(rng, 1.5, 3.0), u(rng, 8e7, 1.5e8), u(rng, 5e6, 2e7)],
        ),
    }
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn is_phase(kind: ModelKind, name: &str) -> bool {
    name.starts_with("phase") && kind != ModelKind::Linear
}

/// Fraction of `trials` noisy fits that land within three standard errors
/// of every generating parameter. Noise is 2 % of the curve's largest value.
pub fn fit_recovery(kind: ModelKind, trials: usize, seed: u64) -> f64 {
    let model = kind.model();
    let names = model.param_names();
    let mut good = 0;
    for t in 0..trials {
        let mut rng = rng_for(seed, &[label("fit-recovery"), label(kind.name()), t as u64]);
        let (x, truth) = model_case(kind, &mut rng);
        let clean: Vec<f64> = x.iter().map(|&v| model.eval(v, &truth)).collect();
        let sigma = 0.02 * clean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        let y: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let Ok(r) = fit(model.as_ref(), &x, &y, Some(&vec![sigma; x.len()])) else { continue };
        let mut canon = truth.clone();
        let mut dummy = vec![0.0; truth.len()];
        model.normalize(&mut canon, &mut dummy);
        let ok = names.iter().enumerate().all(|(k, n)| {
            let gap = if is_phase(kind, n) { angle_gap(r.params[k], canon[k]) } else { (r.params[k] - canon[k]).abs() };
            gap <= 3.0 * r.errors[k]
        });
        if ok {
            good += 1;
        }
    }
    good as f64 / trials as f64
}

/// Worst mismatch between analytic gradients and finite differences,
/// measured on `∂y/∂ln θ` relative to the curve scale. Five-point stencil,
/// so truncation stays well below the tolerance even for fast phases.
pub fn jacobian_error(kind: ModelKind, cases: usize, seed: u64) -> f64 {
    let model = kind.model();
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut rng = rng_for(seed, &[label("jacobian"), label(kind.name()), c as u64]);
        let (x, p) = model_case(kind, &mut rng);
        let n = p.len();
        let mut g = vec![0.0; n];
        for _ in 0..10 {
            let xi = x[rng.random_range(0..x.len())] * rng.random_range(0.97..1.03) + 1e-12;
            model.gradient(xi, &p, &mut g);
            let scale: f64 = (0..n).map(|k| (g[k] * p[k]).abs()).fold(model.eval(xi, &p).abs(), f64::max);
            for k in 0..n {
                let h = 1e-6 * p[k].abs().max(1e-12);
                let at = |d: f64| {
                    let mut q = p.clone();
                    q[k] += d;
                    model.eval(xi, &q)
                };
                let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                worst = worst.max(((fd - g[k]) * p[k]).abs() / scale);
            }
        }
    }
    worst
}

/// Random concrete sequence on the four standard channels.
pub fn random_ir(rng: &mut SimRng) -> SequenceIR {
    let channels = [ChannelId::LaserGate, ChannelId::MwSwitch, ChannelId::CtrSignal, ChannelId::CtrRef];
    let count = rng.random_range(1..12);
    let intervals = (0..count)
        .map(|_| {
            let ch = channels[rng.random_range(0..channels.len())];
            Interval::new(ch, 1e-6 + rng.random_range(0.0..5e-6), rng.random_range(12e-9..2e-6))
        })
        .collect();
    SequenceIR::new("random", intervals)
}

fn channels_of(ir: &SequenceIR) -> Vec<ChannelId> {
    let mut v: Vec<ChannelId> = ir.intervals.iter().map(|iv| iv.channel).collect();
    v.sort();
    v.dedup();
    v
}

/// Compiles random sequences twice and checks determinism and that every
/// run edge lands within half a sample of a latency-compensated request.
pub fn compiler_properties(cases: usize, seed: u64) -> Result<String, String> {
    let mut edges = 0;
    for k in 0..cases {
        let mut rng = rng_for(seed, &[label("compiler"), k as u64]);
        let ir = random_ir(&mut rng);
        let backend = if rng.random_bool(0.5) { BackendProfile::pulseblaster() } else { BackendProfile::discovery() };
        let cal = DelayCalibration {
            laser_gate: rng.random_range(0.0..900e-9),
            mw_switch: rng.random_range(0.0..100e-9),
            counters: rng.random_range(0.0..50e-9),
        };
        let a = compile(&ir, &backend, &cal);
        let b = compile(&ir, &backend, &cal);
        let (a, b) = match (a, b) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(x), Err(y)) if x == y => continue,
            _ => return Err(format!("case {k}: compile outcome differs between runs")),
        };
        if a.to_json() != b.to_json() {
            return Err(format!("case {k}: compiled patterns differ between runs"));
        }
        let t = 1.0 / backend.sample_rate;
        let tol = 0.5 * t * (1.0 + 1e-5);
        for ch in channels_of(&ir) {
            let spans: Vec<(f64, f64)> = ir
                .intervals
                .iter()
                .filter(|iv| iv.channel == ch)
                .map(|iv| {
                    let s = iv.start.at(0.0) - cal.latency(ch);
                    (s, s + iv.duration.at(0.0))
                })
                .collect();
            let runs = a.bits(ch).ok_or(format!("case {k}: channel {ch} missing"))?.runs();
            for &(s, e) in &spans {
                if !runs.iter().any(|&(rs, re)| rs as f64 * t <= s + tol && re as f64 * t >= e - tol) {
                    return Err(format!("case {k}: {ch} [{s:e}, {e:e}] not covered by {runs:?}"));
                }
            }
            for &(rs, re) in &runs {
                let starts = spans.iter().any(|&(s, _)| (rs as f64 * t - s).abs() <= tol);
                let ends = spans.iter().any(|&(_, e)| (re as f64 * t - e).abs() <= tol);
                if !starts || !ends {
                    return Err(format!("case {k}: {ch} run ({rs}, {re}) has no matching requested edge"));
                }
                edges += 2;
            }
        }
        for g in &a.gates {
            if g.end <= g.start || g.end > a.total_samples {
                return Err(format!("case {k}: gate {g:?} outside the pattern"));
            }
        }
    }
    Ok(format!("{cases} sequences, {edges} edges"))
}

/// Dead-time filter output: sorted, spaced by at least the dead time, a
/// subset of the input, and every dropped tag falls inside the dead window
/// of the last kept one.
pub fn dead_time_properties(cases: usize, seed: u64) -> Result<String, String> {
    let mut kept_total = 0;
    for k in 0..cases {
        let mut rng = rng_for(seed, &[label("dead-time"), k as u64]);
        let dead: u64 = rng.random_range(0..50_000);
        let mut tags: Vec<u64> = (0..rng.random_range(0..400)).map(|_| rng.random_range(0..2_000_000)).collect();
        tags.sort_unstable();
        let out = dead_time_filter(&tags, dead);
        if out.windows(2).any(|w| w[1] < w[0] + dead) {
            return Err(format!("case {k}: inter-arrival below {dead} ps"));
        }
        let mut last: Option<u64> = None;
        let mut j = 0;
        for &t in &tags {
            if j < out.len() && out[j] == t && last.is_none_or(|l| t >= l + dead) {
                last = Some(t);
                j += 1;
            } else if last.is_none_or(|l| t >= l + dead) {
                return Err(format!("case {k}: tag {t} dropped outside the dead window"));
            }
        }
        if j != out.len() {
            return Err(format!("case {k}: output is not a subsequence of the input"));
        }
        kept_total += out.len();
    }
    Ok(format!("{cases} streams, {kept_total} tags kept"))
}
