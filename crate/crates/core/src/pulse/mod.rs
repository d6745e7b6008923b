//! Pulse sequences: a declarative timeline, its compilation to sampled
//! digital channels, and the canonical lab sequences.
//!
//! Times in a [`SequenceIR`] are physical: they say when light or microwaves
//! reach the NV and when counters integrate. Channel latencies are removed at
//! compile time, so the electrical pattern leads the physical one.

mod compile;
mod diagram;
mod sequences;

pub use compile::{compile, compile_sweep, BitString, ChannelBits, CompiledPattern, GateWindow, MwEvent, Provenance};
pub use diagram::{timing_diagram, ChannelTimeline, Edge, TimingDiagram};
pub use sequences::{
    sequence_cpmg, sequence_cw_odmr, sequence_hahn, sequence_nuclear_precession, sequence_podmr,
    sequence_rabi, sequence_ramsey, sequence_t1, sequence_xy4, Layout,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const IR_SCHEMA: &str = "nvlab.sequence/1";
pub const PATTERN_SCHEMA: &str = "nvlab.pattern/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("pattern needs {needed} samples but the {backend} backend holds {limit} (its sample buffer limit)")]
    BufferOverflow { needed: u64, limit: u64, backend: String },
    #[error("{channel} pulse of {duration:e} s is shorter than one sample ({period:e} s) or the backend minimum")]
    SubResolutionPulse { channel: ChannelId, duration: f64, period: f64 },
    #[error("{channel} edge at {start:e} s would start before t = 0 after removing its {latency:e} s latency")]
    NegativeStartAfterCompensation { channel: ChannelId, start: f64, latency: f64 },
    #[error("sequence has a sweep; resolve a point or use compile_sweep")]
    UnresolvedSweep,
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("unsupported schema {found:?}, expected {expected:?}")]
    Schema { found: String, expected: String },
}

/// Output line of the timing card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelId {
    LaserGate,
    MwSwitch,
    CtrSignal,
    CtrRef,
    Aux(u8),
}

impl ChannelId {
    pub fn is_gate(self) -> bool {
        matches!(self, ChannelId::CtrSignal | ChannelId::CtrRef)
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelId::LaserGate => f.write_str("laser_gate"),
            ChannelId::MwSwitch => f.write_str("mw_switch"),
            ChannelId::CtrSignal => f.write_str("ctr_signal"),
            ChannelId::CtrRef => f.write_str("ctr_ref"),
            ChannelId::Aux(n) => write!(f, "aux{n}"),
        }
    }
}

impl FromStr for ChannelId {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "laser_gate" => ChannelId::LaserGate,
            "mw_switch" => ChannelId::MwSwitch,
            "ctr_signal" => ChannelId::CtrSignal,
            "ctr_ref" => ChannelId::CtrRef,
            _ => match s.strip_prefix("aux").and_then(|n| n.parse().ok()) {
                Some(n) => ChannelId::Aux(n),
                None => return Err(PulseError::Invalid(format!("unknown channel {s:?}"))),
            },
        })
    }
}

impl Serialize for ChannelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `base + per · x` where `x` is the swept value. Plain numbers deserialize
/// as constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Time {
    Fixed(f64),
    Swept { base: f64, per: f64 },
}

impl Time {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            Time::Fixed(v) => v,
            Time::Swept { base, per } => base + per * x,
        }
    }

    pub fn is_swept(&self) -> bool {
        matches!(self, Time::Swept { per, .. } if *per != 0.0)
    }

    fn plus(self, other: Time) -> Time {
        let (a, b) = (self.parts(), other.parts());
        Time::new(a.0 + b.0, a.1 + b.1)
    }

    fn parts(&self) -> (f64, f64) {
        match *self {
            Time::Fixed(v) => (v, 0.0),
            Time::Swept { base, per } => (base, per),
        }
    }

    fn new(base: f64, per: f64) -> Time {
        if per == 0.0 {
            Time::Fixed(base)
        } else {
            Time::Swept { base, per }
        }
    }
}

impl From<f64> for Time {
    fn from(v: f64) -> Self {
        Time::Fixed(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub channel: ChannelId,
    pub start: Time,
    pub duration: Time,
    /// MW phase, rad. Only meaningful on the MW switch.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub phase: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl Interval {
    pub fn new(channel: ChannelId, start: impl Into<Time>, duration: impl Into<Time>) -> Self {
        Self { channel, start: start.into(), duration: duration.into(), phase: 0.0 }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }
}

/// What the sweep variable sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    MwDuration,
    Tau,
    Wait,
    /// MW carrier frequency, Hz. Timing is fixed.
    MwFrequency,
}

impl SweepParameter {
    pub fn unit(self) -> &'static str {
        match self {
            SweepParameter::MwFrequency => "Hz",
            _ => "s",
        }
    }

    pub fn is_timing(self) -> bool {
        self != SweepParameter::MwFrequency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// One repetition of a pulse program, optionally swept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceIR {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub intervals: Vec<Interval>,
    pub repeat_count: u64,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl Default for SequenceIR {
    fn default() -> Self {
        Self { schema: IR_SCHEMA.into(), name: String::new(), intervals: Vec::new(), repeat_count: 1, sweep: None }
    }
}

impl SequenceIR {
    pub fn new(name: &str, intervals: Vec<Interval>) -> Self {
        Self { name: name.into(), intervals, ..Self::default() }
    }

    pub fn with_sweep(mut self, parameter: SweepParameter, values: Vec<f64>) -> Self {
        self.sweep = Some(Sweep { parameter, values });
        self
    }

    pub fn points(&self) -> usize {
        self.sweep.as_ref().map_or(1, |s| s.values.len())
    }

    /// Concrete, sweep-free sequence at sweep point `i`. Intervals whose
    /// duration resolves to zero are dropped.
    pub fn at(&self, i: usize) -> Result<SequenceIR, PulseError> {
        let x = match &self.sweep {
            None => 0.0,
            Some(s) => *s
                .values
                .get(i)
                .ok_or_else(|| PulseError::Invalid(format!("sweep point {i} out of range")))?,
        };
        let timing = self.sweep.as_ref().is_none_or(|s| s.parameter.is_timing());
        let x = if timing { x } else { 0.0 };
        let intervals = self
            .intervals
            .iter()
            .map(|iv| Interval {
                channel: iv.channel,
                start: Time::Fixed(iv.start.at(x)),
                duration: Time::Fixed(iv.duration.at(x)),
                phase: iv.phase,
            })
            .filter(|iv| iv.duration.at(0.0) != 0.0)
            .collect();
        Ok(SequenceIR { schema: self.schema.clone(), name: self.name.clone(), intervals, repeat_count: self.repeat_count, sweep: None })
    }

    /// MW carrier for sweep point `i` when the sweep sets it.
    pub fn mw_frequency_at(&self, i: usize) -> Option<f64> {
        self.sweep
            .as_ref()
            .filter(|s| s.parameter == SweepParameter::MwFrequency)
            .and_then(|s| s.values.get(i).copied())
    }

    /// Physical end of the last interval at sweep value `x`.
    pub fn length_at(&self, x: f64) -> f64 {
        self.intervals.iter().map(|iv| iv.start.at(x) + iv.duration.at(x)).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        if self.schema != IR_SCHEMA {
            return Err(PulseError::Schema { found: self.schema.clone(), expected: IR_SCHEMA.into() });
        }
        if self.repeat_count == 0 {
            return Err(PulseError::Invalid("repeat_count must be at least 1".into()));
        }
        let xs: Vec<f64> = match &self.sweep {
            Some(s) if s.parameter.is_timing() => {
                if s.values.is_empty() {
                    return Err(PulseError::Invalid("sweep has no values".into()));
                }
                s.values.clone()
            }
            Some(s) => {
                if s.values.is_empty() || s.values.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
                    return Err(PulseError::Invalid("sweep frequencies must be positive".into()));
                }
                vec![0.0]
            }
            None => vec![0.0],
        };
        for iv in &self.intervals {
            for &x in &xs {
                let (s, d) = (iv.start.at(x), iv.duration.at(x));
                if !(s.is_finite() && d.is_finite()) || s < 0.0 {
                    return Err(PulseError::Invalid(format!("{} interval starts at {s:e} s", iv.channel)));
                }
                // Swept pulses may vanish at a sweep point (e.g. t = 0).
                let swept = iv.duration.is_swept();
                if d < 0.0 || (d == 0.0 && !swept) {
                    return Err(PulseError::Invalid(format!("{} interval has duration {d:e} s", iv.channel)));
                }
            }
        }
        let has_pulse = |pred: &dyn Fn(&Interval) -> bool| self.intervals.iter().any(pred);
        let gates = self.intervals.iter().filter(|iv| iv.channel.is_gate());
        for g in gates {
            let gs = g.start.at(xs[0]);
            let ge = gs + g.duration.at(xs[0]);
            let lit = has_pulse(&|iv: &Interval| {
                iv.channel == ChannelId::LaserGate
                    && iv.start.at(xs[0]) < ge
                    && iv.start.at(xs[0]) + iv.duration.at(xs[0]) > gs
            });
            if !lit {
                return Err(PulseError::Invalid(format!("{} gate at {gs:e} s has no laser pulse", g.channel)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("IR serializes");
        hex_digest(&json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("IR serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PulseError> {
        let ir: SequenceIR = serde_json::from_str(text).map_err(|e| PulseError::Invalid(e.to_string()))?;
        ir.validate()?;
        Ok(ir)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub name: String,
    pub sample_rate: f64,
    /// `None` means unlimited.
    pub max_samples: Option<u64>,
    pub min_pulse: f64,
    pub channel_count: u8,
}

impl BackendProfile {
    /// Digital pattern generator with a 1024-sample buffer at 100 MS/s.
    pub fn discovery() -> Self {
        Self { name: "discovery".into(), sample_rate: 100e6, max_samples: Some(1024), min_pulse: 10e-9, channel_count: 16 }
    }

    /// Instruction-based timing card at 500 MHz, effectively unbounded.
    pub fn pulseblaster() -> Self {
        Self { name: "pulseblaster".into(), sample_rate: 500e6, max_samples: None, min_pulse: 2e-9, channel_count: 24 }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "discovery" => Some(Self::discovery()),
            "pulseblaster" => Some(Self::pulseblaster()),
            _ => None,
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) || self.min_pulse < 0.0 {
            return Err(PulseError::Invalid(format!("bad backend profile {}", self.name)));
        }
        Ok(())
    }
}

/// Per-channel latency between an electrical edge and its physical effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayCalibration {
    pub laser_gate: f64,
    pub mw_switch: f64,
    #[serde(default)]
    pub counters: f64,
}

impl Default for DelayCalibration {
    fn default() -> Self {
        Self { laser_gate: 800e-9, mw_switch: 40e-9, counters: 0.0 }
    }
}

impl DelayCalibration {
    pub fn none() -> Self {
        Self { laser_gate: 0.0, mw_switch: 0.0, counters: 0.0 }
    }

    pub fn latency(&self, ch: ChannelId) -> f64 {
        match ch {
            ChannelId::LaserGate => self.laser_gate,
            ChannelId::MwSwitch => self.mw_switch,
            ChannelId::CtrSignal | ChannelId::CtrRef => self.counters,
            ChannelId::Aux(_) => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        if [self.laser_gate, self.mw_switch, self.counters].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(PulseError::Invalid("latencies must be non-negative".into()));
        }
        Ok(())
    }
}
