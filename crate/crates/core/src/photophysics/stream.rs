use nalgebra::{Matrix5, Vector5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LevelPopulations, RateParams, E0, E1, G0, G1};
use crate::rng::{rng_for, SimRng};

pub const PS_PER_S: f64 = 1e12;

/// Detection timestamps in integer picoseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotonStream {
    pub tags: Vec<u64>,
    pub channel: u8,
    pub seed: u64,
}

impl PhotonStream {
    pub fn empty(channel: u8, seed: u64) -> Self {
        Self { tags: Vec::new(), channel, seed }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Sorted union of several streams.
    pub fn merge(streams: &[&PhotonStream], channel: u8, seed: u64) -> Self {
        let mut tags: Vec<u64> = streams.iter().flat_map(|s| s.tags.iter().copied()).collect();
        tags.sort_unstable();
        Self { tags, channel, seed }
    }
}

pub const TAG_CSV_HEADER: &str = "channel,timestamp_ps";

/// All tags as `channel,timestamp_ps` rows in time order, ties by channel.
pub fn tags_to_csv(streams: &[PhotonStream]) -> String {
    let mut rows: Vec<(u64, u8)> = streams.iter().flat_map(|s| s.tags.iter().map(move |&t| (t, s.channel))).collect();
    rows.sort_unstable();
    let mut out = String::with_capacity(16 * rows.len() + 32);
    out.push_str(TAG_CSV_HEADER);
    out.push('\n');
    for (t, c) in rows {
        out.push_str(&format!("{c},{t}\n"));
    }
    out
}

/// Inverse of `tags_to_csv`; one stream per channel seen, seed zero.
pub fn tags_from_csv(text: &str) -> Result<Vec<PhotonStream>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TAG_CSV_HEADER) {
        return Err(format!("expected header {TAG_CSV_HEADER:?}"));
    }
    let mut out: Vec<PhotonStream> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || format!("line {}: {line:?}", n + 2);
        let (c, t) = line.trim().split_once(',').ok_or_else(bad)?;
        let (c, t): (u8, u64) = (c.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?);
        match out.iter_mut().find(|s| s.channel == c) {
            Some(s) => s.tags.push(t),
            None => out.push(PhotonStream { tags: vec![t], channel: c, seed: 0 }),
        }
    }
    for s in &mut out {
        s.tags.sort_unstable();
    }
    out.sort_by_key(|s| s.channel);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserSegment {
    pub duration: f64,
    pub laser_on: bool,
    #[serde(default)]
    pub mw_rate: f64,
}

pub(crate) fn to_ps(t: f64) -> u64 {
    (t * PS_PER_S).round() as u64
}

fn sample_level(pop: &LevelPopulations, rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pop.p.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    4
}

/// Poisson arrivals at `rate` over `[0, duration)`, in ps.
pub(crate) fn poisson_tags(rate: f64, duration: f64, rng: &mut SimRng) -> Vec<u64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate;
        if t >= duration {
            break;
        }
        out.push(to_ps(t));
    }
    out
}

/// Jump-by-jump trajectory over a piecewise-constant laser/MW schedule.
/// Collected photons plus background arrivals, sorted.
pub fn sample_photon_stream(
    pop: &LevelPopulations,
    r: &RateParams,
    schedule: &[LaserSegment],
    seed: u64,
) -> PhotonStream {
    let mut rng = rng_for(seed, &[crate::rng::label("trajectory")]);
    let mut level = sample_level(pop, &mut rng);
    let mut tags = Vec::new();
    let mut t0 = 0.0;
    for seg in schedule {
        let m = r.matrix(seg.laser_on, seg.mw_rate);
        let end = t0 + seg.duration;
        let mut t = t0;
        loop {
            let out = -m[(level, level)];
            if out <= 0.0 {
                break;
            }
            let u: f64 = rng.random();
            t += -(1.0 - u).ln() / out;
            if t >= end {
                break;
            }
            let pick = rng.random::<f64>() * out;
            let mut acc = 0.0;
            let mut next = level;
            for to in 0..5 {
                if to == level {
                    continue;
                }
                acc += m[(to, level)];
                if pick < acc {
                    next = to;
                    break;
                }
            }
            let radiative = (level == E0 && next == G0) || (level == E1 && next == G1);
            if radiative && rng.random::<f64>() < r.collection_efficiency {
                tags.push(to_ps(t));
            }
            level = next;
        }
        t0 = end;
    }
    let mut brng = rng_for(seed, &[crate::rng::label("background")]);
    tags.extend(poisson_tags(r.background_rate, t0, &mut brng));
    tags.sort_unstable();
    PhotonStream { tags, channel: 0, seed }
}

/// Exact sampler of collected-photon arrivals under CW excitation.
///
/// Between detections the emitter is a Markov chain whose collected
/// radiative decays are removed; the waiting-time survival from each restart
/// state (`g0` or `g1`) is tabulated once and inverted per photon. Past the
/// table the survival is a single exponential.
#[derive(Debug, Clone)]
pub struct CwEmitter {
    step: f64,
    survival: [Vec<f64>; 2],
    /// Probability that the detection at each grid time came from `e0`.
    from_e0: [Vec<f64>; 2],
    tail_rate: [f64; 2],
    start: [f64; 2],
}

const TABLE_SPAN: f64 = 2e-6;
const TABLE_STEP: f64 = 0.1e-9;

impl CwEmitter {
    pub fn new(r: &RateParams) -> Self {
        let mut killed: Matrix5<f64> = r.matrix(true, 0.0);
        let kill = r.collection_efficiency * r.radiative_rate;
        killed[(G0, E0)] -= kill;
        killed[(G1, E1)] -= kill;
        let prop = (killed * TABLE_STEP).exp();
        let n = (TABLE_SPAN / TABLE_STEP).round() as usize;
        let mut survival = [Vec::with_capacity(n + 1), Vec::with_capacity(n + 1)];
        let mut from_e0 = [Vec::with_capacity(n + 1), Vec::with_capacity(n + 1)];
        let mut tail_rate = [0.0; 2];
        for j in 0..2 {
            let mut p = Vector5::zeros();
            p[if j == 0 { G0 } else { G1 }] = 1.0;
            for _ in 0..=n {
                survival[j].push(p.sum());
                let e = p[E0] + p[E1];
                from_e0[j].push(if e > 0.0 { p[E0] / e } else { 0.5 });
                p = prop * p;
            }
            let s = &survival[j];
            tail_rate[j] = (s[n - 1] / s[n]).ln() / TABLE_STEP;
        }
        let ss = r.steady_state(0.0);
        let e = ss.p[E0] + ss.p[E1];
        let p0 = if e > 0.0 { ss.p[E0] / e } else { 1.0 };
        Self { step: TABLE_STEP, survival, from_e0, tail_rate, start: [p0, 1.0 - p0] }
    }

    /// Draws the next waiting time and restart index from restart index `j`.
    fn next(&self, j: usize, rng: &mut SimRng) -> (f64, usize) {
        let s = &self.survival[j];
        let n = s.len() - 1;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let (t, k_frac) = if u < s[n] {
            let t = n as f64 * self.step + (s[n] / u).ln() / self.tail_rate[j];
            (t, n as f64)
        } else {
            // s is decreasing: find the last index with s[k] >= u.
            let k = s.partition_point(|&v| v >= u).saturating_sub(1).min(n - 1);
            let frac = if s[k] > s[k + 1] { (s[k] - u) / (s[k] - s[k + 1]) } else { 0.0 };
            ((k as f64 + frac) * self.step, k as f64 + frac)
        };
        let k = (k_frac.round() as usize).min(n);
        let next = if rng.random::<f64>() < self.from_e0[j][k] { 0 } else { 1 };
        (t, next)
    }

    /// Mean detected rate, from the restart chain.
    pub fn mean_rate(&self) -> f64 {
        let mean = |j: usize| {
            let s = &self.survival[j];
            let n = s.len() - 1;
            let body: f64 = s.windows(2).map(|w| 0.5 * (w[0] + w[1]) * self.step).sum();
            body + s[n] / self.tail_rate[j]
        };
        let w = self.start;
        1.0 / (w[0] * mean(0) + w[1] * mean(1))
    }

    /// Arrival times over `[0, duration)` in ps, starting from steady state.
    pub fn sample(&self, duration: f64, rng: &mut SimRng) -> Vec<u64> {
        let mut out = Vec::with_capacity((duration * self.mean_rate() * 1.05) as usize + 16);
        let mut j = if rng.random::<f64>() < self.start[0] { 0 } else { 1 };
        let mut t = 0.0;
        // Start at a random phase of one renewal interval.
        let (first, j1) = self.next(j, rng);
        t += first * rng.random::<f64>();
        j = j1;
        let end = duration;
        loop {
            let (dt, next) = self.next(j, rng);
            t += dt;
            if t >= end {
                break;
            }
            out.push(to_ps(t));
            j = next;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dark_without_background_is_empty() {
        let r = RateParams::default();
        let s = sample_photon_stream(
            &LevelPopulations::level(G0),
            &r,
            &[LaserSegment { duration: 1e-3, laser_on: false, mw_rate: 0.0 }],
            3,
        );
        assert!(s.is_empty());
    }

    #[test]
    fn gillespie_matches_steady_rate() {
        let r = RateParams::default();
        let dur = 0.05;
        let s = sample_photon_stream(
            &r.steady_state(0.0),
            &r,
            &[LaserSegment { duration: dur, laser_on: true, mw_rate: 0.0 }],
            11,
        );
        let expected = r.emission_rate(&r.steady_state(0.0)) * dur;
        let sigma = expected.sqrt();
        assert!((s.len() as f64 - expected).abs() < 4.0 * sigma, "{} vs {expected}", s.len());
        assert!(s.tags.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cw_emitter_rate_matches_steady_state() {
        let r = RateParams::default();
        let em = CwEmitter::new(&r);
        let analytic = r.emission_rate(&r.steady_state(0.0));
        assert!((em.mean_rate() / analytic - 1.0).abs() < 2e-3, "{} {analytic}", em.mean_rate());
        let mut rng = rng_for(5, &[]);
        let tags = em.sample(1.0, &mut rng);
        let n = tags.len() as f64;
        assert!((n - analytic).abs() < 4.0 * analytic.sqrt(), "{n} {analytic}");
    }

    #[test]
    fn tag_csv_round_trip() {
        let a = PhotonStream { tags: vec![5, 90, 1000], channel: 0, seed: 0 };
        let b = PhotonStream { tags: vec![5, 40], channel: 1, seed: 0 };
        let text = tags_to_csv(&[a.clone(), b.clone()]);
        assert!(text.starts_with("channel,timestamp_ps\n0,5\n1,5\n1,40\n"));
        assert_eq!(tags_from_csv(&text).unwrap(), vec![a, b]);
        assert!(tags_from_csv("channel,timestamp_ps\n0,x\n").is_err());
    }
}
