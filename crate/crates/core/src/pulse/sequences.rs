//! Canonical lab sequences.
//!
//! Every repetition is laid out as `[dark relax][MW block][gap][green]`. The
//! green pulse reads out this repetition and initializes the next one, with
//! the signal gate at its rising edge and the reference gate near its end.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use super::{ChannelId, Interval, PulseError, SequenceIR, SweepParameter, Time};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Layout {
    /// Green pulse length, s. Must polarize (> 1 µs).
    pub init: f64,
    /// Counter gate width, s.
    pub readout: f64,
    /// Dark wait after green before the first MW pulse, s. Also covers the
    /// laser latency removed at compile time.
    pub relax: f64,
    /// Dark wait between the last MW pulse and green, s.
    pub gap: f64,
    /// Distance from the reference gate's end to the green falling edge, s.
    pub reference_margin: f64,
}

impl Default for Layout {
    fn default() -> Self {
        Self { init: 3e-6, readout: 300e-9, relax: 1e-6, gap: 100e-9, reference_margin: 200e-9 }
    }
}

impl Layout {
    fn validate(&self) -> Result<(), PulseError> {
        let ok = [self.init, self.readout, self.relax].iter().all(|v| *v > 0.0 && v.is_finite())
            && self.gap >= 0.0
            && self.reference_margin >= 0.0
            && 2.0 * self.readout + self.reference_margin <= self.init;
        if ok {
            Ok(())
        } else {
            Err(PulseError::Invalid(format!("inconsistent layout {self:?}")))
        }
    }
}

/// Cursor-based builder over affine times.
struct Builder {
    layout: Layout,
    cursor: Time,
    intervals: Vec<Interval>,
}

impl Builder {
    fn new(layout: Layout) -> Result<Self, PulseError> {
        layout.validate()?;
        Ok(Self { layout, cursor: Time::Fixed(layout.relax), intervals: Vec::new() })
    }

    fn wait(&mut self, d: Time) -> &mut Self {
        self.cursor = self.cursor.plus(d);
        self
    }

    fn mw(&mut self, d: Time, phase: f64) -> &mut Self {
        self.intervals.push(Interval { channel: ChannelId::MwSwitch, start: self.cursor, duration: d, phase });
        self.wait(d)
    }

    /// Green pulse without gates.
    fn green(&mut self) -> &mut Self {
        let l = self.layout;
        self.intervals.push(Interval::new(ChannelId::LaserGate, self.cursor, l.init));
        self.wait(Time::Fixed(l.init))
    }

    /// Final green pulse with signal and reference gates.
    fn readout(mut self, name: &str) -> SequenceIR {
        let l = self.layout;
        self.wait(Time::Fixed(l.gap));
        let start = self.cursor;
        self.intervals.push(Interval::new(ChannelId::LaserGate, start, l.init));
        self.intervals.push(Interval::new(ChannelId::CtrSignal, start, l.readout));
        let ref_start = start.plus(Time::Fixed(l.init - l.reference_margin - l.readout));
        self.intervals.push(Interval::new(ChannelId::CtrRef, ref_start, l.readout));
        SequenceIR::new(name, self.intervals)
    }
}

fn sweep_var() -> Time {
    Time::Swept { base: 0.0, per: 1.0 }
}

fn scaled(per: f64) -> Time {
    Time::Swept { base: 0.0, per }
}

fn check_list(values: &[f64], what: &str) -> Result<(), PulseError> {
    if values.is_empty() {
        return Err(PulseError::Invalid(format!("{what} list is empty")));
    }
    if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(PulseError::Invalid(format!("{what} values must be non-negative")));
    }
    Ok(())
}

fn check_pulse(d: f64, what: &str) -> Result<(), PulseError> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(PulseError::Invalid(format!("{what} must be positive, got {d:e} s")))
    }
}

/// MW pulse of swept length, then readout.
pub fn sequence_rabi(durations: &[f64], layout: Layout) -> Result<SequenceIR, PulseError> {
    check_list(durations, "pulse length")?;
    let mut b = Builder::new(layout)?;
    b.mw(sweep_var(), 0.0);
    Ok(b.readout("rabi").with_sweep(SweepParameter::MwDuration, durations.to_vec()))
}

/// `π/2 – τ – π/2`.
pub fn sequence_ramsey(taus: &[f64], pi_half: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    check_list(taus, "tau")?;
    check_pulse(pi_half, "π/2 pulse")?;
    let mut b = Builder::new(layout)?;
    b.mw(pi_half.into(), 0.0).wait(sweep_var()).mw(pi_half.into(), 0.0);
    Ok(b.readout("ramsey").with_sweep(SweepParameter::Tau, taus.to_vec()))
}

/// `π/2 – τ – π – τ – π/2`; total free time `2τ`.
pub fn sequence_hahn(taus: &[f64], pi_half: f64, pi: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    check_list(taus, "tau")?;
    check_pulse(pi_half, "π/2 pulse")?;
    check_pulse(pi, "π pulse")?;
    let mut b = Builder::new(layout)?;
    b.mw(pi_half.into(), 0.0)
        .wait(sweep_var())
        .mw(pi.into(), 0.0)
        .wait(sweep_var())
        .mw(pi_half.into(), 0.0);
    Ok(b.readout("hahn").with_sweep(SweepParameter::Tau, taus.to_vec()))
}

/// Fixed π pulse with the carrier swept.
pub fn sequence_podmr(frequencies: &[f64], pi: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    if frequencies.is_empty() || frequencies.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(PulseError::Invalid("frequencies must be positive".into()));
    }
    check_pulse(pi, "π pulse")?;
    let mut b = Builder::new(layout)?;
    b.mw(pi.into(), 0.0);
    Ok(b.readout("podmr").with_sweep(SweepParameter::MwFrequency, frequencies.to_vec()))
}

/// Dark wait `τ` after initialization, no MW.
pub fn sequence_t1(taus: &[f64], layout: Layout) -> Result<SequenceIR, PulseError> {
    check_list(taus, "tau")?;
    let mut b = Builder::new(layout)?;
    b.wait(sweep_var());
    Ok(b.readout("t1").with_sweep(SweepParameter::Wait, taus.to_vec()))
}

/// Nuclear initialization and readout around free precession:
/// `[green][weak π][wait π_L][green][wait t][weak π][green + gates]`.
/// The first green is the previous repetition's readout pulse.
pub fn sequence_nuclear_precession(
    waits: &[f64],
    weak_pi: f64,
    pi_l: f64,
    layout: Layout,
) -> Result<SequenceIR, PulseError> {
    check_list(waits, "precession time")?;
    check_pulse(weak_pi, "selective π pulse")?;
    check_pulse(pi_l, "π_L wait")?;
    let mut b = Builder::new(layout)?;
    b.mw(weak_pi.into(), 0.0).wait(pi_l.into()).green().wait(layout.relax.into()).wait(sweep_var());
    b.mw(weak_pi.into(), 0.0);
    Ok(b.readout("nuclear_precession").with_sweep(SweepParameter::Wait, waits.to_vec()))
}

/// Periodic π train between π/2 pulses. Pulse centres are `τ` apart and
/// the total free time is `n τ`; `phases` cycles over the π pulses.
fn pi_train(name: &str, taus: &[f64], n: usize, phases: &[f64], pi_half: f64, pi: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    check_list(taus, "tau")?;
    check_pulse(pi_half, "π/2 pulse")?;
    check_pulse(pi, "π pulse")?;
    if n == 0 {
        return Err(PulseError::Invalid("need at least one π pulse".into()));
    }
    let mut b = Builder::new(layout)?;
    b.mw(pi_half.into(), 0.0);
    for k in 0..n {
        b.wait(scaled(0.5)).mw(pi.into(), phases[k % phases.len()]).wait(scaled(0.5));
    }
    b.mw(pi_half.into(), 0.0);
    Ok(b.readout(name).with_sweep(SweepParameter::Tau, taus.to_vec()))
}

/// CPMG-n with π pulses phase-shifted by 90° from the π/2 pulses.
pub fn sequence_cpmg(taus: &[f64], n: usize, pi_half: f64, pi: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    pi_train("cpmg", taus, n, &[FRAC_PI_2], pi_half, pi, layout)
}

/// XY4 repeated `cycles` times (phases X Y X Y).
pub fn sequence_xy4(taus: &[f64], cycles: usize, pi_half: f64, pi: f64, layout: Layout) -> Result<SequenceIR, PulseError> {
    pi_train("xy4", taus, 4 * cycles, &[0.0, FRAC_PI_2, 0.0, FRAC_PI_2], pi_half, pi, layout)
}

/// Chopped CW ODMR: light stays on, MW is on for the first half of the
/// period with the signal gate, off for the second half with the reference
/// gate. `settle` is skipped at the start of each half.
pub fn sequence_cw_odmr(frequencies: &[f64], period: f64, settle: f64, lead: f64) -> Result<SequenceIR, PulseError> {
    if frequencies.is_empty() || frequencies.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(PulseError::Invalid("frequencies must be positive".into()));
    }
    check_pulse(period, "period")?;
    let half = 0.5 * period;
    if !(settle >= 0.0 && settle < half) || !(lead >= 0.0) {
        return Err(PulseError::Invalid("settle must be shorter than half the period".into()));
    }
    let ir = SequenceIR::new(
        "cw_odmr",
        vec![
            Interval::new(ChannelId::LaserGate, lead, period),
            Interval::new(ChannelId::MwSwitch, lead, half),
            Interval::new(ChannelId::CtrSignal, lead + settle, half - settle),
            Interval::new(ChannelId::CtrRef, lead + half + settle, half - settle),
        ],
    );
    Ok(ir.with_sweep(SweepParameter::MwFrequency, frequencies.to_vec()))
}
