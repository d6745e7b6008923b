use serde::{Deserialize, Serialize};

use super::{BackendProfile, ChannelId, DelayCalibration, PulseError, SequenceIR, PATTERN_SCHEMA};

/// Fixed-length bit vector, serialized as `{len, hex}` with bit `i` stored
/// in byte `i / 8` at position `i % 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitString {
    len: usize,
    bytes: Vec<u8>,
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        Self { len, bytes: vec![0; len.div_ceil(8)] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set_range(&mut self, from: usize, to: usize) {
        for i in from..to.min(self.len) {
            self.bytes[i / 8] |= 1 << (i % 8);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Sample indices where the level changes, with the new level. A high
    /// first sample counts as a rising edge at 0.
    pub fn transitions(&self) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        let mut prev = false;
        for i in 0..self.len {
            let b = self.get(i);
            if b != prev {
                out.push((i, b));
                prev = b;
            }
        }
        if prev {
            out.push((self.len, false));
        }
        out
    }

    /// Maximal runs of ones as `[start, end)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let t = self.transitions();
        t.chunks(2).map(|w| (w[0].0, w[1].0)).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BitStringRepr {
    len: usize,
    hex: String,
}

impl Serialize for BitString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let hex = self.bytes.iter().map(|b| format!("{b:02x}")).collect();
        BitStringRepr { len: self.len, hex }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = BitStringRepr::deserialize(d)?;
        if r.hex.len() != 2 * r.len.div_ceil(8) {
            return Err(D::Error::custom("bit string length does not match hex payload"));
        }
        let bytes = (0..r.hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&r.hex[i..i + 2], 16))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        Ok(BitString { len: r.len, bytes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelBits {
    pub channel: ChannelId,
    pub bits: BitString,
}

/// Counter window `[start, end)` in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateWindow {
    pub channel: ChannelId,
    pub start: u64,
    pub end: u64,
}

/// MW switch window in samples with its phase tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MwEvent {
    pub start: u64,
    pub end: u64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub ir_hash: String,
    pub backend: String,
    pub calibration: DelayCalibration,
    pub compiler: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompiledPattern {
    pub schema: String,
    pub sample_rate: f64,
    pub total_samples: u64,
    pub repeat_count: u64,
    pub channels: Vec<ChannelBits>,
    pub gates: Vec<GateWindow>,
    pub mw_events: Vec<MwEvent>,
    #[serde(default)]
    pub mw_frequency: Option<f64>,
    pub provenance: Provenance,
}

impl CompiledPattern {
    pub fn bits(&self, ch: ChannelId) -> Option<&BitString> {
        self.channels.iter().find(|c| c.channel == ch).map(|c| &c.bits)
    }

    pub fn period(&self) -> f64 {
        self.total_samples as f64 / self.sample_rate
    }

    pub fn time_of(&self, sample: u64) -> f64 {
        sample as f64 / self.sample_rate
    }

    pub fn gates_on(&self, ch: ChannelId) -> impl Iterator<Item = &GateWindow> {
        self.gates.iter().filter(move |g| g.channel == ch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pattern serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PulseError> {
        let p: CompiledPattern = serde_json::from_str(text).map_err(|e| PulseError::Invalid(e.to_string()))?;
        if p.schema != PATTERN_SCHEMA {
            return Err(PulseError::Schema { found: p.schema, expected: PATTERN_SCHEMA.into() });
        }
        Ok(p)
    }
}

const EDGE_EPS: f64 = 1e-6;

/// Nearest sample; exact halves go down.
fn quantize_start(t: f64, rate: f64) -> i64 {
    let x = t * rate;
    let f = x.floor();
    if x - f <= 0.5 + EDGE_EPS {
        f as i64
    } else {
        f as i64 + 1
    }
}

/// Nearest sample; exact halves go up so pulses are never shortened.
fn quantize_end(t: f64, rate: f64) -> i64 {
    let x = t * rate;
    let f = x.floor();
    if x - f >= 0.5 - EDGE_EPS {
        f as i64 + 1
    } else {
        f as i64
    }
}

/// Compiles a concrete (unswept) sequence.
pub fn compile(ir: &SequenceIR, backend: &BackendProfile, cal: &DelayCalibration) -> Result<CompiledPattern, PulseError> {
    if ir.sweep.is_some() {
        return Err(PulseError::UnresolvedSweep);
    }
    ir.validate()?;
    backend.validate()?;
    cal.validate()?;
    let rate = backend.sample_rate;
    let period = backend.period();
    let mut spans: Vec<(ChannelId, i64, i64, f64)> = Vec::with_capacity(ir.intervals.len());
    let mut phys_end: i64 = 0;
    for iv in &ir.intervals {
        let start = iv.start.at(0.0);
        let dur = iv.duration.at(0.0);
        let limit = period.max(backend.min_pulse);
        if dur < limit * (1.0 - EDGE_EPS) {
            return Err(PulseError::SubResolutionPulse { channel: iv.channel, duration: dur, period: limit });
        }
        let lat = cal.latency(iv.channel);
        let e_start = start - lat;
        if e_start < -1e-15 {
            return Err(PulseError::NegativeStartAfterCompensation { channel: iv.channel, start: e_start, latency: lat });
        }
        let s = quantize_start(e_start.max(0.0), rate);
        let e = quantize_end(e_start.max(0.0) + dur, rate).max(s + 1);
        phys_end = phys_end.max(quantize_end(start + dur, rate));
        spans.push((iv.channel, s, e, iv.phase));
    }
    let total = spans.iter().map(|s| s.2).fold(phys_end, i64::max) as u64;
    if let Some(limit) = backend.max_samples {
        if total > limit {
            return Err(PulseError::BufferOverflow { needed: total, limit, backend: backend.name.clone() });
        }
    }
    let mut ids: Vec<ChannelId> = spans.iter().map(|s| s.0).collect();
    ids.sort();
    ids.dedup();
    if ids.len() > backend.channel_count as usize {
        return Err(PulseError::Invalid(format!("{} channels exceed the backend's {}", ids.len(), backend.channel_count)));
    }
    let channels = ids
        .iter()
        .map(|&ch| {
            let mut bits = BitString::zeros(total as usize);
            for &(c, s, e, _) in &spans {
                if c == ch {
                    bits.set_range(s as usize, e as usize);
                }
            }
            ChannelBits { channel: ch, bits }
        })
        .collect::<Vec<_>>();
    let mut gates: Vec<GateWindow> = spans
        .iter()
        .filter(|s| s.0.is_gate())
        .map(|&(channel, s, e, _)| GateWindow { channel, start: s as u64, end: e as u64 })
        .collect();
    gates.sort_by_key(|g| (g.start, g.channel));
    let mut mw_events: Vec<MwEvent> = spans
        .iter()
        .filter(|s| s.0 == ChannelId::MwSwitch)
        .map(|&(_, s, e, phase)| MwEvent { start: s as u64, end: e as u64, phase })
        .collect();
    mw_events.sort_by_key(|m| m.start);
    Ok(CompiledPattern {
        schema: PATTERN_SCHEMA.into(),
        sample_rate: rate,
        total_samples: total,
        repeat_count: ir.repeat_count,
        channels,
        gates,
        mw_events,
        mw_frequency: None,
        provenance: Provenance {
            ir_hash: ir.hash(),
            backend: backend.name.clone(),
            calibration: cal.clone(),
            compiler: format!("nvlab-core {}", env!("CARGO_PKG_VERSION")),
        },
    })
}

/// One pattern per sweep point, each re-armed on its own. Fails on the
/// first point that does not fit the backend.
pub fn compile_sweep(
    ir: &SequenceIR,
    backend: &BackendProfile,
    cal: &DelayCalibration,
) -> Result<Vec<CompiledPattern>, PulseError> {
    ir.validate()?;
    (0..ir.points())
        .map(|i| {
            let mut p = compile(&ir.at(i)?, backend, cal)?;
            p.mw_frequency = ir.mw_frequency_at(i);
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::Interval;
    use super::*;

    fn laser(start: f64, dur: f64) -> Interval {
        Interval::new(ChannelId::LaserGate, start, dur)
    }

    #[test]
    fn ten_microseconds_fill_a_thousand_samples() {
        let ir = SequenceIR::new("flat", vec![laser(0.0, 10e-6)]);
        let p = compile(&ir, &BackendProfile::discovery(), &DelayCalibration::none()).unwrap();
        assert_eq!(p.total_samples, 1000);
        assert_eq!(p.bits(ChannelId::LaserGate).unwrap().count_ones(), 1000);
    }

    #[test]
    fn twenty_microseconds_overflow_the_buffer() {
        let ir = SequenceIR::new("flat", vec![laser(0.0, 20e-6)]);
        let err = compile(&ir, &BackendProfile::discovery(), &DelayCalibration::none()).unwrap_err();
        assert_eq!(err, PulseError::BufferOverflow { needed: 2000, limit: 1024, backend: "discovery".into() });
        assert!(err.to_string().contains("1024"));
        assert!(compile(&ir, &BackendProfile::pulseblaster(), &DelayCalibration::none()).is_ok());
    }

    #[test]
    fn ten_nanosecond_pulse_is_one_sample() {
        let ir = SequenceIR::new("mw", vec![Interval::new(ChannelId::MwSwitch, 100e-9, 10e-9)]);
        let p = compile(&ir, &BackendProfile::discovery(), &DelayCalibration::none()).unwrap();
        assert_eq!(p.bits(ChannelId::MwSwitch).unwrap().runs(), vec![(10, 11)]);
        let short = SequenceIR::new("mw", vec![Interval::new(ChannelId::MwSwitch, 100e-9, 5e-9)]);
        assert!(matches!(
            compile(&short, &BackendProfile::discovery(), &DelayCalibration::none()),
            Err(PulseError::SubResolutionPulse { .. })
        ));
    }

    #[test]
    fn ties_round_toward_longer_pulses() {
        // 15 ns to 40 ns at 10 ns samples: both edges are exact halves.
        let ir = SequenceIR::new("mw", vec![Interval::new(ChannelId::MwSwitch, 15e-9, 25e-9)]);
        let p = compile(&ir, &BackendProfile::discovery(), &DelayCalibration::none()).unwrap();
        assert_eq!(p.mw_events[0].start, 1);
        assert_eq!(p.mw_events[0].end, 4);
    }

    #[test]
    fn latency_shifts_channels_earlier() {
        let cal = DelayCalibration::default();
        let ir = SequenceIR::new(
            "ro",
            vec![laser(1e-6, 2e-6), Interval::new(ChannelId::CtrSignal, 1e-6, 300e-9)],
        );
        let p = compile(&ir, &BackendProfile::discovery(), &cal).unwrap();
        let rise = p.bits(ChannelId::LaserGate).unwrap().runs()[0].0;
        assert_eq!(p.gates[0].start - rise as u64, 80);
        let early = SequenceIR::new("ro", vec![laser(0.5e-6, 2e-6)]);
        assert!(matches!(
            compile(&early, &BackendProfile::discovery(), &cal),
            Err(PulseError::NegativeStartAfterCompensation { .. })
        ));
    }

    #[test]
    fn sweeps_must_be_resolved() {
        let ir = SequenceIR::new("s", vec![laser(0.0, 1e-6)]).with_sweep(super::super::SweepParameter::Tau, vec![1.0]);
        assert_eq!(compile(&ir, &BackendProfile::discovery(), &DelayCalibration::none()), Err(PulseError::UnresolvedSweep));
    }

    #[test]
    fn pattern_json_round_trip() {
        let ir = SequenceIR::new("ro", vec![laser(0.0, 1.23e-6), Interval::new(ChannelId::CtrRef, 0.5e-6, 0.3e-6)]);
        let p = compile(&ir, &BackendProfile::pulseblaster(), &DelayCalibration::none()).unwrap();
        let back = CompiledPattern::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }
}
