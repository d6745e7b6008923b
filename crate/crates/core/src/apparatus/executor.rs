//! Runs one repetition of a compiled pattern against one NV.
//!
//! The NV is tracked in one of two pictures. While light is on (or excited
//! and singlet population is still decaying) it is a set of five-level
//! populations, one per nuclear sector. In the dark it is a coherent
//! [`SpinState`]. Switching to the optical picture keeps only populations,
//! and `g1` goes back to the spin picture split evenly between `±1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::photophysics::{mw_pump_rate, polarize, LevelPopulations, RateParams, RatePropagator, E0, E1, G0, G1, S};
use crate::pulse::{ChannelId, CompiledPattern, DelayCalibration};
use crate::spin::{
    apply_mw_pulse_inhomogeneous, free_evolve, nuclear_precess_about, transition_frequencies, Branch, Dephasing,
    MwDrive, SpinError, SpinParams, SpinState, TransitionFrequencies, LEVEL_MINUS, LEVEL_PLUS, LEVEL_ZERO,
};

/// Where a channel takes its on/off state from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    #[default]
    Off,
    On,
    Pattern,
}

#[derive(Debug, Clone)]
pub struct NvModel {
    pub params: SpinParams,
    pub dephasing: Dephasing,
    /// Pump set for the laser power, collection scaled by PSF and brightness.
    pub rates: RateParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveSettings {
    pub laser: GateSource,
    pub mw: GateSource,
    pub mw_frequency: f64,
    /// Hz.
    pub rabi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternResponse {
    /// Expected detected photons per repetition, one entry per gate window.
    pub gate_photons: Vec<f64>,
    pub repetitions_simulated: usize,
}

#[derive(Debug, Clone)]
struct Segment {
    duration: f64,
    laser: bool,
    mw: Option<f64>,
    gates: Vec<usize>,
}

const EPS_T: f64 = 1e-13;

fn wrap(a: f64, b: f64, period: f64, out: &mut Vec<(f64, f64)>) {
    let len = b - a;
    let a = a.rem_euclid(period);
    let b = a + len;
    if b <= period + EPS_T {
        out.push((a, b.min(period)));
    } else {
        out.push((a, period));
        out.push((0.0, b - period));
    }
}

fn segments(p: &CompiledPattern, drive: &DriveSettings, lat: &DelayCalibration) -> Vec<Segment> {
    let period = p.period();
    let rate = p.sample_rate;
    let mut laser = Vec::new();
    match drive.laser {
        GateSource::On => laser.push((0.0, period)),
        GateSource::Off => {}
        GateSource::Pattern => {
            if let Some(bits) = p.bits(ChannelId::LaserGate) {
                for (s, e) in bits.runs() {
                    wrap(s as f64 / rate + lat.laser_gate, e as f64 / rate + lat.laser_gate, period, &mut laser);
                }
            }
        }
    }
    let mut mw: Vec<(f64, f64, f64)> = Vec::new();
    match drive.mw {
        GateSource::On => mw.push((0.0, period, 0.0)),
        GateSource::Off => {}
        GateSource::Pattern => {
            for ev in &p.mw_events {
                let mut parts = Vec::new();
                wrap(ev.start as f64 / rate + lat.mw_switch, ev.end as f64 / rate + lat.mw_switch, period, &mut parts);
                mw.extend(parts.into_iter().map(|(a, b)| (a, b, ev.phase)));
            }
        }
    }
    let mut gates: Vec<(f64, f64, usize)> = Vec::new();
    for (i, g) in p.gates.iter().enumerate() {
        let mut parts = Vec::new();
        wrap(g.start as f64 / rate + lat.counters, g.end as f64 / rate + lat.counters, period, &mut parts);
        gates.extend(parts.into_iter().map(|(a, b)| (a, b, i)));
    }
    let mut cuts = vec![0.0, period];
    cuts.extend(laser.iter().flat_map(|&(a, b)| [a, b]));
    cuts.extend(mw.iter().flat_map(|&(a, b, _)| [a, b]));
    cuts.extend(gates.iter().flat_map(|&(a, b, _)| [a, b]));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < EPS_T);
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 < EPS_T {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        let inside = |a: f64, b: f64| a <= mid && mid < b;
        out.push(Segment {
            duration: t1 - t0,
            laser: laser.iter().any(|&(a, b)| inside(a, b)),
            mw: mw.iter().find(|&&(a, b, _)| inside(a, b)).map(|m| m.2),
            gates: gates.iter().filter(|&&(a, b, _)| inside(a, b)).map(|g| g.2).collect(),
        });
    }
    out
}

/// Steady collected-photon rate under CW light, averaged over nuclear
/// sectors. `drive` is `(frequency, rabi)` when MW is on.
pub(crate) fn cw_emission_rate(nv: &NvModel, drive: Option<(f64, f64)>) -> f64 {
    let tf = transition_frequencies(&nv.params);
    let n = nv.params.nuclear.dim();
    let r = &nv.rates;
    let total: f64 = (0..n)
        .map(|j| {
            let w = drive.map_or(0.0, |(f, rabi)| {
                [Branch::Minus1, Branch::Plus1]
                    .iter()
                    .map(|&b| mw_pump_rate(rabi, f - tf.line(b, j), r.pump_rate, nv.dephasing.t2_star))
                    .sum()
            });
            r.emission_rate(&r.steady_state(w))
        })
        .sum();
    total / n as f64
}

/// Per gate window: open time and the part of it with the laser on, s.
pub fn gate_exposure(pattern: &CompiledPattern, drive: &DriveSettings, latency: &DelayCalibration) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); pattern.gates.len()];
    for seg in segments(pattern, drive, latency) {
        for &g in &seg.gates {
            out[g].0 += seg.duration;
            if seg.laser {
                out[g].1 += seg.duration;
            }
        }
    }
    out
}

enum Picture {
    Optical(Vec<[f64; 5]>),
    Coherent(SpinState),
}

impl Picture {
    fn signature(&self) -> Vec<f64> {
        match self {
            Picture::Optical(v) => v.iter().flatten().copied().collect(),
            Picture::Coherent(s) => {
                // Same layout as the optical picture for comparison.
                s.populations().iter().flat_map(|p| [p[LEVEL_ZERO], p[LEVEL_PLUS] + p[LEVEL_MINUS], 0.0, 0.0, 0.0]).collect()
            }
        }
    }
}

struct Runner<'a> {
    nv: &'a NvModel,
    tf: TransitionFrequencies,
    drive: DriveSettings,
    cache: HashMap<(u64, bool, u64), RatePropagator>,
    larmor: Option<(f64, [f64; 3])>,
}

impl<'a> Runner<'a> {
    fn propagator(&mut self, dt: f64, laser: bool, w: f64) -> &RatePropagator {
        let r = &self.nv.rates;
        self.cache
            .entry((dt.to_bits(), laser, w.to_bits()))
            .or_insert_with(|| RatePropagator::new(&r.matrix(laser, w), dt))
    }

    fn incoherent_rate(&self, sector: usize) -> f64 {
        let r = &self.nv.rates;
        [Branch::Minus1, Branch::Plus1]
            .iter()
            .map(|&b| {
                let detuning = self.drive.mw_frequency - self.tf.line(b, sector);
                mw_pump_rate(self.drive.rabi, detuning, r.pump_rate, self.nv.dephasing.t2_star)
            })
            .sum()
    }

    fn to_optical(&self, s: &SpinState) -> Vec<[f64; 5]> {
        s.populations()
            .iter()
            .map(|p| [p[LEVEL_ZERO], p[LEVEL_PLUS] + p[LEVEL_MINUS], 0.0, 0.0, 0.0])
            .collect()
    }

    fn to_coherent(&self, pops: &[[f64; 5]]) -> SpinState {
        let beta = self.nv.rates.singlet_branch_g0;
        let levels: Vec<[f64; 3]> = pops
            .iter()
            .map(|p| {
                let g0 = p[G0] + p[E0] + beta * p[S];
                let g1 = p[G1] + p[E1] + (1.0 - beta) * p[S];
                let mut l = [0.0; 3];
                l[LEVEL_ZERO] = g0;
                l[LEVEL_PLUS] = 0.5 * g1;
                l[LEVEL_MINUS] = 0.5 * g1;
                l
            })
            .collect();
        let mut s = SpinState::from_populations(&levels, pops.len());
        s.set_dephasing(self.nv.dephasing);
        s
    }

    fn optical_step(&mut self, pops: &mut [[f64; 5]], seg: &Segment) -> f64 {
        let r = self.nv.rates;
        let kill = r.collection_efficiency * r.radiative_rate;
        let mut photons = 0.0;
        for (j, p) in pops.iter_mut().enumerate() {
            let w = if seg.laser && seg.mw.is_some() { self.incoherent_rate(j) } else { 0.0 };
            let prop = self.propagator(seg.duration, seg.laser, w);
            let v = nalgebra::Vector5::from_row_slice(p);
            let next = prop.transfer * v;
            let int = prop.integral * v;
            photons += kill * (int[E0] + int[E1]);
            for k in 0..5 {
                p[k] = next[k].max(0.0);
            }
        }
        photons
    }

    fn dark_step(&mut self, s: &mut SpinState, seg: &Segment) -> Result<(), SpinError> {
        let nv = self.nv;
        match seg.mw {
            Some(phase) if self.drive.rabi > 0.0 => {
                let branch = if (self.drive.mw_frequency - self.tf.f_minus).abs()
                    <= (self.drive.mw_frequency - self.tf.f_plus).abs()
                {
                    Branch::Minus1
                } else {
                    Branch::Plus1
                };
                let d = MwDrive {
                    frequency: self.drive.mw_frequency,
                    rabi_frequency: self.drive.rabi,
                    phase,
                    target_branch: branch,
                };
                apply_mw_pulse_inhomogeneous(s, &d, seg.duration, &nv.params)
            }
            _ => {
                free_evolve(s, seg.duration, &nv.params, &nv.dephasing)?;
                if let Some((f, axis)) = self.larmor {
                    nuclear_precess_about(s, seg.duration, f, axis)?;
                }
                Ok(())
            }
        }
    }
}

/// Expected photons per gate for one repetition of `pattern`, repeated from
/// a polarized start until the state at the start of the period stops
/// changing.
pub fn pattern_response(
    nv: &NvModel,
    pattern: &CompiledPattern,
    drive: &DriveSettings,
    latency: &DelayCalibration,
) -> Result<PatternResponse, SpinError> {
    let segs = segments(pattern, drive, latency);
    let n = nv.params.nuclear.dim();
    let larmor = nv.params.nuclear_larmor().filter(|f| *f > 0.0).map(|f| {
        let m = nv.params.field_magnitude();
        (f, [nv.params.b[0] / m, nv.params.b[1] / m, nv.params.b[2] / m])
    });
    let mut run = Runner { nv, tf: transition_frequencies(&nv.params), drive: *drive, cache: HashMap::new(), larmor };
    let start = polarize(&LevelPopulations::level(G1), &nv.rates)
        .map_err(|e| SpinError::InvalidParams(e.to_string()))?;
    let mut picture = Picture::Optical(vec![start.p.map(|v| v / n as f64); n]);
    let mut photons = vec![0.0; pattern.gates.len()];
    let mut reps = 0;
    const MAX_REPS: usize = 60;
    while reps < MAX_REPS {
        reps += 1;
        let before = picture.signature();
        photons.iter_mut().for_each(|p| *p = 0.0);
        for seg in &segs {
            let lit = seg.laser;
            picture = match picture {
                Picture::Coherent(s) if lit => Picture::Optical(run.to_optical(&s)),
                other => other,
            };
            picture = match picture {
                Picture::Optical(mut pops) => {
                    if lit || seg.mw.is_none() {
                        let ph = run.optical_step(&mut pops, seg);
                        for &g in &seg.gates {
                            photons[g] += ph;
                        }
                    }
                    if lit {
                        Picture::Optical(pops)
                    } else {
                        let mut s = run.to_coherent(&pops);
                        if seg.mw.is_some() {
                            run.dark_step(&mut s, seg)?;
                        } else if let Some((f, axis)) = run.larmor {
                            // Ground population precesses while the rest decays.
                            free_evolve(&mut s, seg.duration, &nv.params, &nv.dephasing)?;
                            nuclear_precess_about(&mut s, seg.duration, f, axis)?;
                        }
                        Picture::Coherent(s)
                    }
                }
                Picture::Coherent(mut s) => {
                    run.dark_step(&mut s, seg)?;
                    Picture::Coherent(s)
                }
            };
        }
        let after = picture.signature();
        let change = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if before.len() == after.len() && change < 1e-10 {
            break;
        }
    }
    Ok(PatternResponse { gate_photons: photons, repetitions_simulated: reps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photophysics::readout_window;
    use crate::pulse::{compile, compile_sweep, sequence_rabi, BackendProfile, Interval, Layout, SequenceIR};
    use crate::spin::GAUSS;

    fn nv() -> NvModel {
        let params = SpinParams::default().with_field([0.0, 0.0, 28.0 * GAUSS]);
        NvModel { params, dephasing: Dephasing::default(), rates: RateParams::default() }
    }

    fn pulsed(freq: f64, rabi: f64) -> DriveSettings {
        DriveSettings { laser: GateSource::Pattern, mw: GateSource::Pattern, mw_frequency: freq, rabi }
    }

    #[test]
    fn wrapped_laser_counts_like_a_plain_window() {
        // Gate at the very start of a pulse from a polarized state reproduces
        // the single-window readout integral.
        let lat = DelayCalibration::none();
        let ir = SequenceIR::new(
            "ro",
            vec![Interval::new(ChannelId::LaserGate, 5e-6, 10e-6), Interval::new(ChannelId::CtrSignal, 5e-6, 300e-9)],
        );
        let p = compile(&ir, &BackendProfile::pulseblaster(), &lat).unwrap();
        let r = pattern_response(&nv(), &p, &pulsed(2.87e9, 0.0), &lat).unwrap();
        let rates = RateParams::default();
        let pol = polarize(&LevelPopulations::level(G1), &rates).unwrap();
        let ro = readout_window(&rates, 300e-9).unwrap();
        let expect = pol.p[G0] * ro.mean_counts_bright + pol.p[G1] * ro.mean_counts_dark;
        assert!((r.gate_photons[0] / expect - 1.0).abs() < 1e-3, "{} {expect}", r.gate_photons[0]);
    }

    #[test]
    fn off_resonant_mw_leaves_bright_level() {
        let lat = DelayCalibration::default();
        let ir = sequence_rabi(&[0.0, 38e-9], Layout::default()).unwrap();
        let pats = compile_sweep(&ir, &BackendProfile::pulseblaster(), &lat).unwrap();
        let far = pulsed(3.5e9, 13.16e6);
        let a = pattern_response(&nv(), &pats[0], &far, &lat).unwrap();
        let b = pattern_response(&nv(), &pats[1], &far, &lat).unwrap();
        assert!((a.gate_photons[0] / b.gate_photons[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn resonant_pi_pulse_darkens_the_signal_gate() {
        let lat = DelayCalibration::default();
        let ir = sequence_rabi(&[0.0, 38e-9], Layout::default()).unwrap();
        let pats = compile_sweep(&ir, &BackendProfile::pulseblaster(), &lat).unwrap();
        let model = nv();
        let f = transition_frequencies(&model.params).f_minus;
        let d = pulsed(f, 1.0 / (2.0 * 38e-9));
        let a = pattern_response(&model, &pats[0], &d, &lat).unwrap();
        let b = pattern_response(&model, &pats[1], &d, &lat).unwrap();
        let contrast = 1.0 - b.gate_photons[0] / a.gate_photons[0];
        assert!(contrast > 0.15, "{contrast}");
        // Reference gates agree: the long green pulse repolarizes.
        assert!((a.gate_photons[1] / b.gate_photons[1] - 1.0).abs() < 2e-3);
    }
}
