use serde::{Deserialize, Serialize};
use std::fmt::Write;

use super::{compile, BackendProfile, ChannelId, DelayCalibration, PulseError, SequenceIR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub sample: u64,
    /// Seconds from pattern start.
    pub time: f64,
    pub rising: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTimeline {
    pub channel: ChannelId,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingDiagram {
    pub sample_rate: f64,
    pub total_samples: u64,
    pub channels: Vec<ChannelTimeline>,
}

impl TimingDiagram {
    /// Edge list, one line per channel, times in ns.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ch in &self.channels {
            let _ = write!(out, "{:<11}", ch.channel.to_string());
            for e in &ch.edges {
                let _ = write!(out, " {}{:.1}", if e.rising { '↑' } else { '↓' }, e.time * 1e9);
            }
            out.push('\n');
        }
        out
    }
}

/// Electrical edges of the compiled pattern. Sweeps are drawn at their
/// first point.
pub fn timing_diagram(
    ir: &SequenceIR,
    backend: &BackendProfile,
    cal: &DelayCalibration,
) -> Result<TimingDiagram, PulseError> {
    let concrete = if ir.sweep.is_some() { ir.at(0)? } else { ir.clone() };
    if concrete.intervals.is_empty() {
        return Ok(TimingDiagram { sample_rate: backend.sample_rate, total_samples: 0, channels: Vec::new() });
    }
    let p = compile(&concrete, backend, cal)?;
    let channels = p
        .channels
        .iter()
        .map(|c| ChannelTimeline {
            channel: c.channel,
            edges: c
                .bits
                .transitions()
                .into_iter()
                .map(|(s, rising)| Edge { sample: s as u64, time: s as f64 / p.sample_rate, rising })
                .collect(),
        })
        .collect();
    Ok(TimingDiagram { sample_rate: p.sample_rate, total_samples: p.total_samples, channels })
}

#[cfg(test)]
mod tests {
    use super::super::{sequence_rabi, Layout};
    use super::*;

    #[test]
    fn rabi_diagram_shows_shifted_laser() {
        let ir = sequence_rabi(&[100e-9], Layout::default()).unwrap();
        let d = timing_diagram(&ir, &BackendProfile::discovery(), &DelayCalibration::default()).unwrap();
        let names: Vec<ChannelId> = d.channels.iter().map(|c| c.channel).collect();
        assert_eq!(names, vec![ChannelId::LaserGate, ChannelId::MwSwitch, ChannelId::CtrSignal, ChannelId::CtrRef]);
        let laser_up = d.channels[0].edges[0].sample;
        let gate_up = d.channels[2].edges[0].sample;
        assert_eq!(gate_up - laser_up, 80);
        assert!(d.render().contains("laser_gate"));
    }

    #[test]
    fn empty_sequence_gives_empty_diagram() {
        let d = timing_diagram(&SequenceIR::default(), &BackendProfile::discovery(), &DelayCalibration::none()).unwrap();
        assert!(d.channels.is_empty());
    }
}
