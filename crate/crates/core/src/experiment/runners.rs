use crate::analysis::{fit, ModelKind};
use crate::apparatus::GateSource;
use crate::photophysics::Correlator;
use crate::pulse::{
    compile_sweep, sequence_cpmg, sequence_cw_odmr, sequence_hahn, sequence_nuclear_precession, sequence_podmr,
    sequence_rabi, sequence_ramsey, sequence_t1, sequence_xy4, ChannelId, SequenceIR,
};
use crate::spin::GAMMA_C13;

use super::track::track_nv;
use super::{Axis, Ctx, DdScheme, Experiment, ExperimentError, Measured, Progress, RawGates};

const RATIO_NORMALIZATION: &str = "signal gate counts / reference gate counts, summed over repetitions";

/// Longest pulse in the automatic π calibration sweep, s.
const AUTO_PI_SPAN: f64 = 200e-9;

const RETRACK_TOLERANCE: f64 = 0.01;
const RETRACK_ITERATIONS: usize = 3;
const RETRACK_DWELL: f64 = 0.01;

pub(crate) fn dispatch(ctx: &mut Ctx) -> Result<Measured, ExperimentError> {
    let layout = ctx.spec.layout;
    let e = ctx.spec.experiment.clone();
    let points = match &e {
        Experiment::ConfocalScan { width, height, step, .. } => grid(*width, *step).len() * grid(*height, *step).len(),
        Experiment::Track { max_iterations, .. } => *max_iterations,
        Experiment::G2 { .. } => 0,
        Experiment::CwOdmr { frequencies, .. } | Experiment::PulsedOdmr { frequencies, .. } => frequencies.len(),
        Experiment::Rabi { durations, .. } => durations.len(),
        Experiment::Ramsey { taus, .. }
        | Experiment::HahnEcho { taus, .. }
        | Experiment::DynDecoupling { taus, .. }
        | Experiment::T1 { taus } => taus.len(),
        Experiment::NuclearPrecession { waits, .. } => waits.len(),
    };
    ctx.emit(Progress::Started { kind: e.kind().into(), points });
    match e {
        Experiment::ConfocalScan { origin, width, height, step, dwell } => confocal(ctx, origin, width, height, step, dwell),
        Experiment::Track { guess, tolerance, max_iterations, dwell } => track(ctx, guess, tolerance, max_iterations, dwell),
        Experiment::G2 { duration, bin, window, chunk } => g2(ctx, duration, bin, window, chunk),
        Experiment::CwOdmr { frequencies, power_dbm, dwell, period } => {
            let settle = (0.1 * period).min(1e-6);
            // Leave room for the compiler to pull every channel earlier.
            let cal = ctx.spec.calibration.clone();
            let lead = cal.laser_gate.max(cal.mw_switch).max(cal.counters);
            let ir = sequence_cw_odmr(&frequencies, period, settle, lead)?;
            let reps = ((dwell / period).round() as u64).max(1);
            let axis = Axis::new("frequency", "Hz", frequencies.clone());
            let f0 = frequencies[0];
            sweep(ctx, &ir, axis, Some((f0, power_dbm)), reps, true)
        }
        Experiment::PulsedOdmr { frequencies, pi, power_dbm } => {
            let f0 = frequencies[0];
            let pi = match pi {
                Some(p) => p,
                None => auto_pi(ctx, 0.5 * (f0 + frequencies[frequencies.len() - 1]), power_dbm)?,
            };
            let ir = sequence_podmr(&frequencies, pi, layout)?;
            let axis = Axis::new("frequency", "Hz", frequencies);
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, axis, Some((f0, power_dbm)), reps, true)
        }
        Experiment::Rabi { durations, frequency, power_dbm } => {
            let ir = sequence_rabi(&durations, layout)?;
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("duration", "s", durations), Some((frequency, power_dbm)), reps, true)
        }
        Experiment::Ramsey { taus, frequency, pi, power_dbm } => {
            let pi = resolve_pi(ctx, pi, frequency, power_dbm)?;
            let ir = sequence_ramsey(&taus, 0.5 * pi, layout)?;
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("tau", "s", taus), Some((frequency, power_dbm)), reps, true)
        }
        Experiment::HahnEcho { taus, frequency, pi, power_dbm } => {
            let pi = resolve_pi(ctx, pi, frequency, power_dbm)?;
            let ir = sequence_hahn(&taus, 0.5 * pi, pi, layout)?;
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("tau", "s", taus), Some((frequency, power_dbm)), reps, true)
        }
        Experiment::DynDecoupling { taus, frequency, scheme, count, pi, power_dbm } => {
            let pi = resolve_pi(ctx, pi, frequency, power_dbm)?;
            let ir = match scheme {
                DdScheme::Cpmg => sequence_cpmg(&taus, count, 0.5 * pi, pi, layout)?,
                DdScheme::Xy4 => sequence_xy4(&taus, count, 0.5 * pi, pi, layout)?,
            };
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("tau", "s", taus), Some((frequency, power_dbm)), reps, true)
        }
        Experiment::T1 { taus } => {
            let ir = sequence_t1(&taus, layout)?;
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("tau", "s", taus), None, reps, true)
        }
        Experiment::NuclearPrecession { waits, frequency, pi, power_dbm, larmor, hyperfine } => {
            let snap = ctx.s.snapshot();
            let f_l = larmor.unwrap_or_else(|| GAMMA_C13 * snap.field.iter().map(|b| b * b).sum::<f64>().sqrt());
            ctx.derived.insert("larmor_assumed".into(), f_l);
            let rabi = ctx.s.config().mw.rabi_for(power_dbm.unwrap_or(snap.settings.mw.power_dbm));
            if rabi >= hyperfine / 5.0 {
                ctx.warnings.push(format!(
                    "drive {:.3} MHz is not nuclear-selective: keep it below a fifth of the {:.1} MHz hyperfine splitting",
                    rabi / 1e6,
                    hyperfine / 1e6
                ));
            }
            let ir = sequence_nuclear_precession(&waits, pi, 0.5 / f_l, layout)?;
            let reps = ctx.spec.repetitions();
            sweep(ctx, &ir, Axis::new("wait", "s", waits), Some((frequency, power_dbm)), reps, true)
        }
    }
}

/// Points `0, step, 2 step, …` up to `extent`.
fn grid(extent: f64, step: f64) -> Vec<f64> {
    let n = (extent / step + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

fn resolve_pi(ctx: &mut Ctx, pi: Option<f64>, frequency: f64, power: Option<f64>) -> Result<f64, ExperimentError> {
    match pi {
        Some(p) => Ok(p),
        None => auto_pi(ctx, frequency, power),
    }
}

/// Rabi sweep plus sinusoid fit; π is half the fitted period.
fn auto_pi(ctx: &mut Ctx, frequency: f64, power: Option<f64>) -> Result<f64, ExperimentError> {
    ctx.emit(Progress::Note { message: "calibrating π from a Rabi sweep".into() });
    let period = ctx.spec.backend.profile().period();
    let step = (2e-9 / period).ceil() * period;
    let durations = grid(AUTO_PI_SPAN, step);
    let ir = sequence_rabi(&durations, ctx.spec.layout)?;
    let reps = ctx.spec.repetitions();
    let m = sweep(ctx, &ir, Axis::new("duration", "s", durations), Some((frequency, power)), reps, false)?;
    if !m.complete {
        return Err(ExperimentError::Invalid("cancelled during π calibration".into()));
    }
    let r = fit(ModelKind::Rabi.model().as_ref(), &m.axis.values, &m.signal, Some(&m.error))
        .map_err(ExperimentError::Calibration)?;
    let pi = r.derived("pi_time").map(|d| d.value).ok_or(ExperimentError::Invalid("no π from fit".into()))?;
    ctx.derived.insert("calibrated_pi".into(), pi);
    Ok(pi)
}

fn gate_sum(counts: &[u64], gates: &[crate::pulse::GateWindow], ch: ChannelId) -> u64 {
    counts.iter().zip(gates).filter(|(_, g)| g.channel == ch).map(|(c, _)| *c).sum()
}

/// Compiles `ir` point by point and runs each pattern. `mw` is
/// `(frequency, power)`; `None` keeps the MW switched off.
fn sweep(
    ctx: &mut Ctx,
    ir: &SequenceIR,
    axis: Axis,
    mw: Option<(f64, Option<f64>)>,
    reps: u64,
    report: bool,
) -> Result<Measured, ExperimentError> {
    let patterns = compile_sweep(ir, &ctx.spec.backend.profile(), &ctx.spec.calibration)?;
    let st = ctx.s.snapshot().settings;
    ctx.s.set_laser(st.laser.power_uw, GateSource::Pattern)?;
    match mw {
        Some((f, p)) => ctx.s.set_mw(f, p.unwrap_or(st.mw.power_dbm), GateSource::Pattern)?,
        None => ctx.s.set_mw(st.mw.frequency, st.mw.power_dbm, GateSource::Off)?,
    }
    let mut signal = Vec::with_capacity(patterns.len());
    let mut error = Vec::with_capacity(patterns.len());
    let mut raw = RawGates::default();
    let mut complete = true;
    let mut last_track = ctx.s.snapshot().clock;
    for (i, p) in patterns.into_iter().enumerate() {
        if ctx.cancelled() {
            complete = false;
            break;
        }
        if let Some(every) = ctx.spec.track_every {
            if ctx.s.snapshot().clock - last_track >= every {
                retrack(ctx)?;
                last_track = ctx.s.snapshot().clock;
            }
        }
        let gates = p.gates.clone();
        ctx.s.arm_pattern(p)?;
        let g = ctx.s.run(reps)?;
        let sg = gate_sum(&g.counts, &gates, ChannelId::CtrSignal);
        let rf = gate_sum(&g.counts, &gates, ChannelId::CtrRef);
        let (y, e) = if sg > 0 && rf > 0 {
            let y = sg as f64 / rf as f64;
            (y, y * (1.0 / sg as f64 + 1.0 / rf as f64).sqrt())
        } else {
            (0.0, 1.0)
        };
        signal.push(y);
        error.push(e);
        raw.signal.push(sg);
        raw.reference.push(rf);
        raw.repetitions.push(reps);
        if report {
            ctx.emit(Progress::Point { index: i, x: axis.values[i], y, error: e });
        }
    }
    Ok(Measured {
        axis,
        axis2: None,
        signal_name: "normalized_pl",
        signal_unit: "",
        signal,
        error,
        raw: Some(raw),
        normalization: RATIO_NORMALIZATION,
        complete,
    })
}

/// Re-centres on the NV under CW light, then restores the pulsed drive.
fn retrack(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let st = ctx.s.snapshot();
    let set = st.settings;
    ctx.s.set_laser(set.laser.power_uw, GateSource::On)?;
    ctx.s.set_mw(set.mw.frequency, set.mw.power_dbm, GateSource::Off)?;
    let r = track_nv(ctx.s, set.stage, RETRACK_TOLERANCE, RETRACK_ITERATIONS, RETRACK_DWELL)?;
    ctx.emit(Progress::Note { message: format!("re-tracked to {:?} at t = {:.1} s", r.position, st.clock) });
    ctx.s.set_laser(set.laser.power_uw, set.laser.gate)?;
    ctx.s.set_mw(set.mw.frequency, set.mw.power_dbm, set.mw.gate)?;
    Ok(())
}

fn confocal(ctx: &mut Ctx, origin: [f64; 3], width: f64, height: f64, step: f64, dwell: f64) -> Result<Measured, ExperimentError> {
    let range = ctx.s.config().stage_range;
    let far = [origin[0] + width, origin[1] + height, origin[2]];
    if origin.iter().chain(&far).any(|v| !(0.0..=range).contains(v)) {
        return Err(ExperimentError::WindowOutOfRange(format!("{origin:?} + ({width}, {height}) µm, range {range} µm")));
    }
    let xs: Vec<f64> = grid(width, step).into_iter().map(|v| origin[0] + v).collect();
    let ys: Vec<f64> = grid(height, step).into_iter().map(|v| origin[1] + v).collect();
    let st = ctx.s.snapshot().settings;
    ctx.s.set_laser(st.laser.power_uw, GateSource::On)?;
    let mut signal = Vec::with_capacity(xs.len() * ys.len());
    let mut error = Vec::with_capacity(xs.len() * ys.len());
    let mut complete = true;
    'rows: for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            if ctx.cancelled() {
                complete = false;
                break 'rows;
            }
            ctx.s.move_stage([x, y, origin[2]])?;
            let c = ctx.s.count(dwell)?;
            let rate = c as f64 / dwell;
            signal.push(rate);
            error.push((c as f64).max(1.0).sqrt() / dwell);
            ctx.emit(Progress::Pixel { ix, iy, x, y, rate });
        }
    }
    Ok(Measured {
        axis: Axis::new("x", "um", xs),
        axis2: Some(Axis::new("y", "um", ys)),
        signal_name: "count_rate",
        signal_unit: "Hz",
        signal,
        error,
        raw: None,
        normalization: "counts / dwell",
        complete,
    })
}

fn track(ctx: &mut Ctx, guess: [f64; 3], tol: f64, max_iter: usize, dwell: f64) -> Result<Measured, ExperimentError> {
    let st = ctx.s.snapshot().settings;
    ctx.s.set_laser(st.laser.power_uw, GateSource::On)?;
    let r = track_nv(ctx.s, guess, tol, max_iter, dwell)?;
    for (i, (&rate, &step)) in r.peak_rates.iter().zip(&r.steps).enumerate() {
        ctx.emit(Progress::Point { index: i, x: (i + 1) as f64, y: rate, error: step });
    }
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        ctx.derived.insert((*name).into(), r.position[k]);
    }
    ctx.derived.insert("final_rate".into(), r.final_rate);
    let n = r.peak_rates.len();
    Ok(Measured {
        axis: Axis::new("iteration", "", (1..=n).map(|i| i as f64).collect()),
        axis2: None,
        signal_name: "peak_rate",
        signal_unit: "Hz",
        error: r.peak_rates.iter().map(|v| (v * dwell).max(1.0).sqrt() / dwell).collect(),
        signal: r.peak_rates,
        raw: None,
        normalization: "fitted peak counts / dwell",
        complete: true,
    })
}

fn g2(ctx: &mut Ctx, duration: f64, bin: f64, window: f64, chunk: f64) -> Result<Measured, ExperimentError> {
    let det = ctx.s.config().detector;
    if !det.splitter || det.channels < 2 {
        return Err(ExperimentError::SingleChannel);
    }
    let st = ctx.s.snapshot().settings;
    ctx.s.set_laser(st.laser.power_uw, GateSource::On)?;
    let mut corr = Correlator::new(bin, window);
    let mut elapsed = 0.0;
    let mut counts = [0u64; 2];
    let mut complete = true;
    while duration - elapsed > 1e-12 {
        if ctx.cancelled() {
            complete = false;
            break;
        }
        let c = chunk.min(duration - elapsed);
        let ch = ctx.s.acquire_tags(c)?;
        corr.add_chunk(&ch[0].tags, &ch[1].tags, c);
        counts[0] += ch[0].tags.len() as u64;
        counts[1] += ch[1].tags.len() as u64;
        elapsed += c;
        ctx.emit(Progress::Acquired { elapsed, total: duration });
    }
    let r = corr.finish();
    if elapsed > 0.0 {
        ctx.derived.insert("rate_ch0".into(), counts[0] as f64 / elapsed);
        ctx.derived.insert("rate_ch1".into(), counts[1] as f64 / elapsed);
    }
    ctx.derived.insert("integration_time".into(), elapsed);
    Ok(Measured {
        axis: Axis::new("tau", "s", r.tau),
        axis2: None,
        signal_name: "g2",
        signal_unit: "",
        signal: r.g2,
        error: r.error,
        raw: None,
        normalization: "coincidences / (N0 N1 bin / T)",
        complete,
    })
}
