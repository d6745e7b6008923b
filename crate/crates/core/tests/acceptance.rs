//! Reference-lab acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Tolerances are pinned below.

mod common;

use std::thread;
use std::time::Instant;

use nvlab_core::analysis::{fit, FitResult, ModelKind};
use nvlab_core::apparatus::{
    to_nv_frame, Apparatus, Preset, Session, C13_B_PERP, N15_ECHO_DETUNING,
};
use nvlab_core::experiment::{replay, run_experiment, Backend, Dataset, Experiment, ExperimentError, ExperimentSpec};
use nvlab_core::photophysics::{
    calibrate, evolve_rates, CalibrationTargets, LevelPopulations, RateParams, G1, S, SINGLET_LIFETIME,
};
use nvlab_core::pulse::{Layout, PulseError};
use nvlab_core::spin::{
    field_from_splitting, transition_frequencies, SpinParams, TransitionFrequencies, GAMMA_C13, GAMMA_E, GAUSS,
};

const ODMR_LINES: [f64; 2] = [2.7917e9, 2.9490e9];
const ODMR_CENTER_TOL: f64 = 0.5e6;
const ODMR_FIELD: (f64, f64) = (28.1, 0.3);
const ODMR_WALL_LIMIT: f64 = 30.0;

const RABI_FREQUENCY: f64 = 13.16e6;
const RABI_PI: (f64, f64) = (38e-9, 1e-9);
const RABI_CONTRAST: (f64, f64) = (0.30, 0.05);

const RAMSEY_TONES: [f64; 2] = [7.12e6, 4.22e6];
const RAMSEY_TOL: f64 = 0.05e6;

const HAHN_TC: f64 = 10.7e-6;
const HAHN_TC_REL: f64 = 0.05;
const HAHN_REVIVAL_TOL: f64 = 1e-6;

const G2_SINGLE_MAX: f64 = 0.5;
const G2_PAIR: (f64, f64) = (0.5, 0.05);

const PHOTO_POLARIZATION: (f64, f64) = (0.80, 0.02);
const PHOTO_CONTRAST: (f64, f64) = (0.30, 0.03);
const PHOTO_HALF_LIFE_REL: f64 = 0.01;

const NUCLEAR_SPLITTING: (f64, f64) = (14e6, 0.2e6);
const NUCLEAR_LARMOR_REL: f64 = 0.03;

const FIT_TRIALS: usize = 200;
const FIT_SUCCESS: f64 = 0.95;

struct Line {
    pass: bool,
    name: &'static str,
    detail: String,
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    Line { pass, name, detail }
}

fn within(v: f64, (target, tol): (f64, f64)) -> bool {
    (v - target).abs() <= tol
}

fn session(preset: Preset) -> Session {
    Apparatus::new(preset.config(), 1).and_then(|a| a.session()).expect("preset apparatus")
}

fn lines_now(s: &Session) -> TransitionFrequencies {
    let nv = &s.config().sample.nvs[0];
    let p = SpinParams::default().with_field(to_nv_frame(s.snapshot().field, 0)).with_nuclear(nv.nuclear);
    transition_frequencies(&p)
}

fn fit_dataset(kind: ModelKind, d: &Dataset, range: impl Fn(f64) -> bool) -> Result<FitResult, String> {
    let (x, y) = d.xy();
    let keep: Vec<usize> = (0..x.len()).filter(|&i| range(x[i])).collect();
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    fit(kind.model().as_ref(), &pick(&x), &pick(&y), Some(&pick(&d.error))).map_err(|e| e.to_string())
}

fn grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + i as f64 * step).collect()
}

fn odmr() -> Result<Vec<Line>, String> {
    let wall = Instant::now();
    let mut s = session(Preset::Odmr28G);
    let freqs = grid(2.75e9, 2e6, 121);
    let exp = Experiment::CwOdmr { frequencies: freqs, power_dbm: None, dwell: 2.0, period: 20e-6 };
    let d = run_experiment(&mut s, &ExperimentSpec::new(3, exp), &mut |_| {}).map_err(|e| e.to_string())?;
    let wall = wall.elapsed().as_secs_f64();
    let r = fit_dataset(ModelKind::DoubleLorentzian, &d, |_| true)?;
    let c = [r.param("center1").unwrap_or(f64::NAN), r.param("center2").unwrap_or(f64::NAN)];
    let off = [c[0] - ODMR_LINES[0], c[1] - ODMR_LINES[1]];
    let split = r.derived("splitting").map_or(f64::NAN, |v| v.value);
    let b = field_from_splitting(split, GAMMA_E).map_err(|e| e.to_string())? / GAUSS;
    let simulated = d.metadata.clock_end - d.metadata.clock_start;
    Ok(vec![
        line(
            "ODMR dips",
            off.iter().all(|o| o.abs() <= ODMR_CENTER_TOL),
            format!("{:.4} / {:.4} GHz (offsets {:+.3} / {:+.3} MHz, tol 0.5 MHz)", c[0] / 1e9, c[1] / 1e9, off[0] / 1e6, off[1] / 1e6),
        ),
        line("ODMR field", within(b, ODMR_FIELD), format!("{b:.2} G from a {:.2} MHz splitting (28.1 ± 0.3 G)", split / 1e6)),
        line(
            "ODMR runtime",
            wall < ODMR_WALL_LIMIT,
            format!("{wall:.1} s wall clock (< 30 s) for {simulated:.0} s of simulated acquisition"),
        ),
    ])
}

fn rabi() -> Result<Vec<Line>, String> {
    let mut s = session(Preset::Rabi);
    let f = lines_now(&s).f_minus;
    let exp = Experiment::Rabi { durations: grid(0.0, 2e-9, 101), frequency: f, power_dbm: None };
    let layout = Layout { readout: 150e-9, ..Layout::default() };
    let spec = ExperimentSpec::new(3, exp).with_layout(layout).with_repetitions(1_000_000).with_tracking(300.0);
    let d = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let r = fit_dataset(ModelKind::Rabi, &d, |_| true)?;
    let pi = r.derived("pi_time").map_or(f64::NAN, |v| v.value);
    let (a, b) = (r.param("amplitude").unwrap_or(f64::NAN).abs(), r.param("offset").unwrap_or(f64::NAN));
    let contrast = 2.0 * a / (a + b);
    let omega = r.param("omega").unwrap_or(f64::NAN) / (2.0 * std::f64::consts::PI);
    Ok(vec![
        line(
            "Rabi π time",
            within(pi, RABI_PI) && ((omega - RABI_FREQUENCY) / RABI_FREQUENCY).abs() < 0.02,
            format!("{:.2} ns at fitted Ω = {:.2} MHz (38 ± 1 ns)", pi * 1e9, omega / 1e6),
        ),
        line("Rabi contrast", within(contrast, RABI_CONTRAST), format!("{contrast:.3} (0.30 ± 0.05)")),
    ])
}

fn ramsey() -> Result<Vec<Line>, String> {
    let mut s = session(Preset::N15Echo);
    let f = lines_now(&s).f_minus - N15_ECHO_DETUNING;
    let exp = Experiment::Ramsey { taus: grid(0.0, 10e-9, 201), frequency: f, pi: Some(38e-9), power_dbm: None };
    let spec = ExperimentSpec::new(3, exp).with_repetitions(200_000).with_tracking(300.0);
    let d = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let r = fit_dataset(ModelKind::RamseyTwoTone, &d, |_| true)?;
    let tones = [r.param("frequency1").unwrap_or(f64::NAN), r.param("frequency2").unwrap_or(f64::NAN)];
    let ok = (0..2).all(|k| (tones[k] - RAMSEY_TONES[k]).abs() <= RAMSEY_TOL);
    Ok(vec![line(
        "Ramsey tones",
        ok,
        format!("{:.3} / {:.3} MHz (7.12 / 4.22 ± 0.05 MHz)", tones[0] / 1e6, tones[1] / 1e6),
    )])
}

fn hahn() -> Result<Vec<Line>, String> {
    let mut s = session(Preset::N15Echo);
    let f = lines_now(&s).f_minus;
    let exp = Experiment::HahnEcho { taus: grid(0.0, 0.5e-6, 121), frequency: f, pi: Some(38e-9), power_dbm: None };
    let spec = ExperimentSpec::new(3, exp).with_repetitions(1_000_000).with_tracking(300.0);
    let d = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let env = fit_dataset(ModelKind::HahnEnvelope, &d, |t| t < 20e-6)?;
    let tc = env.param("tc").unwrap_or(f64::NAN);
    let peak = fit_dataset(ModelKind::GaussianPeak, &d, |t| (25e-6..=56e-6).contains(&t))?;
    let revival = peak.param("center").unwrap_or(f64::NAN);
    let expected = 1.0 / (GAMMA_C13 * s.snapshot().field.iter().map(|v| v * v).sum::<f64>().sqrt());
    let overflow = match run_experiment(&mut s, &spec.clone().with_backend(Backend::Discovery), &mut |_| {}) {
        Err(ExperimentError::Pulse(PulseError::BufferOverflow { needed, limit, .. })) => {
            Ok(format!("BufferOverflow: {needed} samples needed, limit {limit}"))
        }
        Err(e) => Err(format!("unexpected error: {e}")),
        Ok(_) => Err("sweep ran without error".into()),
    };
    Ok(vec![
        line(
            "Hahn Tc",
            ((tc - HAHN_TC) / HAHN_TC).abs() <= HAHN_TC_REL,
            format!("{:.2} ± {:.2} µs (10.7 µs ± 5 %)", tc * 1e6, env.error("tc").unwrap_or(f64::NAN) * 1e6),
        ),
        line(
            "Hahn revival",
            (revival - expected).abs() <= HAHN_REVIVAL_TOL && (expected - 40.6e-6).abs() < 0.05e-6,
            format!("{:.2} µs, 1/f_L = {:.2} µs (± 1 µs)", revival * 1e6, expected * 1e6),
        ),
        line("Hahn discovery backend", overflow.is_ok(), overflow.unwrap_or_else(|e| e)),
    ])
}

fn g2() -> Result<Vec<Line>, String> {
    let run = |p: Preset| -> Result<(FitResult, Dataset), String> {
        let mut s = session(p);
        let exp = Experiment::G2 { duration: 300.0, bin: 0.5e-9, window: 100e-9, chunk: 1.0 };
        let d = run_experiment(&mut s, &ExperimentSpec::new(3, exp), &mut |_| {}).map_err(|e| e.to_string())?;
        Ok((fit_dataset(ModelKind::G2, &d, |_| true)?, d))
    };
    let (single, _) = run(Preset::G2Single)?;
    let (pair, _) = run(Preset::G2Pair)?;
    let z = |r: &FitResult| r.derived("g2_zero").map_or((f64::NAN, f64::NAN), |d| (d.value, d.error));
    let (zs, es) = z(&single);
    let (zp, ep) = z(&pair);
    let model = ModelKind::G2.model();
    let identity = [&single, &pair].iter().all(|r| {
        let rho = r.param("rho").unwrap_or(f64::NAN);
        (model.eval(0.0, &r.params) - (1.0 - rho * rho)).abs() <= 1e-12
    });
    let taus = grid(5e-9, 0.5e-9, 190);
    let bunch = taus.iter().map(|&t| model.eval(t, &single.params)).fold(f64::MIN, f64::max);
    Ok(vec![
        line("g² single NV", zs < G2_SINGLE_MAX, format!("g²(0) = {zs:.3} ± {es:.3} (< 0.5)")),
        line("g² two-NV spot", within(zp, G2_PAIR), format!("g²(0) = {zp:.3} ± {ep:.3} (0.5 ± 0.05)")),
        line("g² zero-delay identity", identity, "model(0) = 1 − ρ² for both fits (1e-12)".into()),
        line("g² bunching", bunch > 1.0, format!("fitted maximum {bunch:.3} at intermediate delay (> 1)")),
    ])
}

fn photophysics() -> Result<Vec<Line>, String> {
    let rep = calibrate(&RateParams::default(), &CalibrationTargets::default()).map_err(|e| e.to_string())?;
    let r = rep.rates;
    let err = |e: nvlab_core::photophysics::PhotoError| e.to_string();
    let (lit, _) = evolve_rates(&LevelPopulations::level(G1), &r, true, 2e-6).map_err(err)?;
    let (dark, _) = evolve_rates(&lit, &r, false, 5e-6).map_err(err)?;
    let pol = dark.ground_polarization();
    let singlet = |t: f64| -> f64 {
        evolve_rates(&LevelPopulations::level(S), &r, false, t).map(|(p, _)| p.p[S]).unwrap_or(f64::NAN)
    };
    let (mut lo, mut hi) = (1e-9, 1e-6);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if singlet(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let half = 0.5 * (lo + hi);
    let expected = std::f64::consts::LN_2 * SINGLET_LIFETIME;
    Ok(vec![
        line(
            "Photophysics polarization",
            within(pol, PHOTO_POLARIZATION) && within(rep.polarization, PHOTO_POLARIZATION),
            format!("{pol:.3} after a 2 µs pulse, {:.3} after the 10 µs init (0.80 ± 0.02)", rep.polarization),
        ),
        line("Photophysics contrast", within(rep.contrast, PHOTO_CONTRAST), format!("{:.3} in 300 ns (0.30 ± 0.03)", rep.contrast)),
        line(
            "Photophysics singlet half-life",
            ((half - expected) / expected).abs() <= PHOTO_HALF_LIFE_REL,
            format!("{:.2} ns by bisection, ln2·178 ns = {:.2} ns (± 1 %)", half * 1e9, expected * 1e9),
        ),
    ])
}

fn nuclear() -> Result<Vec<Line>, String> {
    let mut s = session(Preset::C13Nuclear);
    let fc = lines_now(&s).f_minus;
    let exp = Experiment::PulsedOdmr { frequencies: grid(fc - 15e6, 0.25e6, 121), pi: Some(500e-9), power_dbm: None };
    let spec = ExperimentSpec::new(3, exp).with_repetitions(1_000_000).with_tracking(300.0);
    let d = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let r = fit_dataset(ModelKind::DoubleLorentzian, &d, |_| true)?;
    let split = r.derived("splitting").map_or((f64::NAN, f64::NAN), |v| (v.value, v.error));
    let line_f = r.param("center1").unwrap_or(fc);
    let exp = Experiment::NuclearPrecession {
        waits: grid(0.0, 0.4e-6, 101),
        frequency: line_f,
        pi: 500e-9,
        power_dbm: None,
        larmor: None,
        hyperfine: 14e6,
    };
    let spec = ExperimentSpec::new(4, exp).with_repetitions(1_000_000).with_tracking(300.0);
    let d = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let p = fit_dataset(ModelKind::NuclearPrecession, &d, |_| true)?;
    let fl = p.param("frequency").unwrap_or(f64::NAN);
    let expected = GAMMA_C13 * C13_B_PERP;
    Ok(vec![
        line(
            "Nuclear doublet",
            within(split.0, NUCLEAR_SPLITTING),
            format!("{:.3} ± {:.3} MHz (14 ± 0.2 MHz)", split.0 / 1e6, split.1 / 1e6),
        ),
        line(
            "Nuclear precession",
            ((fl - expected) / expected).abs() <= NUCLEAR_LARMOR_REL,
            format!("{:.2} kHz vs γ·B⊥ = {:.2} kHz (± 3 %)", fl / 1e3, expected / 1e3),
        ),
    ])
}

fn determinism() -> Result<String, String> {
    let mut s = session(Preset::Rabi);
    let f = lines_now(&s).f_minus;
    let spec = ExperimentSpec::new(9, Experiment::Rabi { durations: grid(0.0, 4e-9, 30), frequency: f, power_dbm: None })
        .with_repetitions(20_000);
    let a = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let b = run_experiment(&mut session(Preset::Rabi), &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    if a.to_json() != b.to_json() {
        return Err("two fresh runs differ".into());
    }
    let c = replay(&s.config(), &a).map_err(|e| e.to_string())?;
    if c.to_json() != a.to_json() {
        return Err("replay differs".into());
    }
    let mut s = session(Preset::G2Single);
    let g = ExperimentSpec::new(9, Experiment::G2 { duration: 2.0, bin: 0.5e-9, window: 100e-9, chunk: 1.0 });
    let d = run_experiment(&mut s, &g, &mut |_| {}).map_err(|e| e.to_string())?;
    replay(&s.config(), &d).map_err(|e| e.to_string())?;
    Ok("Rabi and g² datasets bit-identical across runs and replay".into())
}

fn properties() -> Vec<Line> {
    let check = |name: &'static str, r: Result<String, String>| match r {
        Ok(d) => line(name, true, d),
        Err(e) => line(name, false, e),
    };
    let jac: Vec<(ModelKind, f64)> = ModelKind::ALL.iter().map(|&k| (k, common::jacobian_error(k, 10, 5))).collect();
    let worst = jac.iter().map(|j| j.1).fold(0.0, f64::max);
    vec![
        check("Property: spin invariants", common::spin_invariants(10_000, 1)),
        check("Property: generalized Rabi", common::rabi_closed_form(200, 1)),
        line("Property: fit Jacobians", worst < 1e-6, format!("{} models, worst scaled error {worst:.1e} (1e-6)", jac.len())),
        check("Property: pulse compiler", common::compiler_properties(2_000, 1)),
        check("Property: dead-time filter", common::dead_time_properties(2_000, 1)),
        check("Property: determinism", determinism()),
    ]
}

fn fit_recovery() -> Vec<Line> {
    let rates: Vec<(ModelKind, f64)> =
        ModelKind::ALL.iter().map(|&k| (k, common::fit_recovery(k, FIT_TRIALS, 17))).collect();
    let detail = rates.iter().map(|(k, r)| format!("{} {:.1}%", k.name(), r * 100.0)).collect::<Vec<_>>().join(", ");
    vec![line("Fit recovery", rates.iter().all(|r| r.1 >= FIT_SUCCESS), format!("{detail} (≥ 95 % of 200)"))]
}

type Criterion = fn() -> Result<Vec<Line>, String>;

fn main() {
    let start = Instant::now();
    // Timed on its own so the runtime check sees no contention.
    let first = odmr().unwrap_or_else(|e| vec![line("ODMR", false, format!("did not complete: {e}"))]);
    let criteria: [(&'static str, Criterion); 8] = [
        ("Rabi", rabi),
        ("Ramsey", ramsey),
        ("Hahn", hahn),
        ("g²", g2),
        ("Photophysics", photophysics),
        ("Nuclear", nuclear),
        ("Property suites", || Ok(properties())),
        ("Fit recovery", || Ok(fit_recovery())),
    ];
    let mut results: Vec<Vec<Line>> = thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(name, f)| {
                scope.spawn(move || {
                    f().unwrap_or_else(|e| vec![line(name, false, format!("did not complete: {e}"))])
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("criterion panicked")).collect()
    });
    results.insert(0, first);
    let mut failed = 0;
    for l in results.iter().flatten() {
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
        failed += usize::from(!l.pass);
    }
    println!("acceptance: {failed} failing, {:.0} s", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
