use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::photophysics::{PhotonStream, PS_PER_S};
use crate::rng::{label, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    /// s.
    pub dead_time: f64,
    /// Per channel, Hz.
    pub dark_rate: f64,
    pub channels: u8,
    pub splitter: bool,
}

impl Default for DetectorProfile {
    fn default() -> Self {
        Self { dead_time: 22e-9, dark_rate: 250.0, channels: 2, splitter: true }
    }
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dead_time >= 0.0) || !(self.dark_rate >= 0.0) {
            return Err("dead time and dark rate must be non-negative".into());
        }
        if !(1..=2).contains(&self.channels) {
            return Err(format!("{} detector channels; 1 or 2 supported", self.channels));
        }
        if self.splitter && self.channels != 2 {
            return Err("a splitter needs two channels".into());
        }
        Ok(())
    }
}

/// Drops tags closer than `dead_ps` to the previous accepted one.
pub fn dead_time_filter(tags: &[u64], dead_ps: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(tags.len());
    let mut last: Option<u64> = None;
    for &t in tags {
        if last.is_none_or(|l| t >= l + dead_ps) {
            out.push(t);
            last = Some(t);
        }
    }
    out
}

/// Routes a sorted photon stream through the splitter, adds dark counts over
/// `[0, duration)` and applies each channel's dead time.
pub fn detect(stream: &PhotonStream, det: &DetectorProfile, duration: f64, seed: u64) -> Vec<PhotonStream> {
    let n = if det.splitter { 2 } else { det.channels.max(1) as usize };
    let mut route = rng_for(seed, &[label("splitter")]);
    let mut lanes: Vec<Vec<u64>> = vec![Vec::new(); n];
    for &t in &stream.tags {
        let ch = if det.splitter { usize::from(route.random::<bool>()) } else { 0 };
        lanes[ch].push(t);
    }
    let dead_ps = (det.dead_time * PS_PER_S).round() as u64;
    lanes
        .into_iter()
        .enumerate()
        .map(|(ch, mut tags)| {
            let mut rng = rng_for(seed, &[label("dark"), ch as u64]);
            tags.extend(crate::photophysics::poisson_tags(det.dark_rate, duration, &mut rng));
            tags.sort_unstable();
            PhotonStream { tags: dead_time_filter(&tags, dead_ps), channel: ch as u8, seed }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(splitter: bool) -> DetectorProfile {
        DetectorProfile { dark_rate: 0.0, splitter, channels: if splitter { 2 } else { 1 }, ..Default::default() }
    }

    #[test]
    fn close_pair_on_one_channel_loses_the_second() {
        let s = PhotonStream { tags: vec![1_000_000, 1_010_000], channel: 0, seed: 0 };
        let out = detect(&s, &quiet(false), 1e-3, 1);
        assert_eq!(out[0].tags, vec![1_000_000]);
    }

    #[test]
    fn split_pair_keeps_both() {
        let s = PhotonStream { tags: vec![1_000_000, 1_010_000], channel: 0, seed: 0 };
        // Find a seed that routes the two photons apart.
        let kept = (0..64)
            .map(|seed| detect(&s, &quiet(true), 1e-3, seed))
            .find(|o| o[0].len() == 1 && o[1].len() == 1);
        assert!(kept.is_some());
    }

    #[test]
    fn without_splitter_output_is_filtered_input() {
        let tags: Vec<u64> = vec![0, 5_000, 30_000, 40_000, 80_000];
        let s = PhotonStream { tags: tags.clone(), channel: 0, seed: 0 };
        let out = detect(&s, &quiet(false), 1e-6, 9);
        assert_eq!(out[0].tags, dead_time_filter(&tags, 22_000));
        assert_eq!(out[0].tags, vec![0, 30_000, 80_000]);
    }
}
