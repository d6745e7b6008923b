use serde::{Deserialize, Serialize};

/// Normalized coincidence histogram between two detector channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Bin centers `t1 - t0`, s.
    pub tau: Vec<f64>,
    pub g2: Vec<f64>,
    pub error: Vec<f64>,
    pub counts: Vec<u64>,
    /// Coincidences expected per bin for uncorrelated streams.
    pub uncorrelated_level: f64,
}

/// Streaming full correlator: every pair within the window counts, not just
/// start-stop neighbours. Feed it time-aligned chunks.
#[derive(Debug, Clone)]
pub struct Correlator {
    bin_ps: i64,
    half_bins: i64,
    counts: Vec<u64>,
    expected: f64,
}

impl Correlator {
    /// `bin` and `window` in seconds; bins are centred on multiples of `bin`
    /// from `-window` to `+window`.
    pub fn new(bin: f64, window: f64) -> Self {
        let bin_ps = ((bin * 1e12).round() as i64).max(1);
        let half_bins = ((window * 1e12) as i64 / bin_ps).max(0);
        Self { bin_ps, half_bins, counts: vec![0; (2 * half_bins + 1) as usize], expected: 0.0 }
    }

    pub fn add_chunk(&mut self, ch0: &[u64], ch1: &[u64], duration: f64) {
        let reach = self.half_bins * self.bin_ps + self.bin_ps / 2;
        let half = self.bin_ps / 2;
        let mut lo = 0usize;
        for &t0 in ch0 {
            let t0 = t0 as i64;
            while lo < ch1.len() && (ch1[lo] as i64) < t0 - reach {
                lo += 1;
            }
            let mut k = lo;
            while k < ch1.len() {
                let dt = ch1[k] as i64 - t0;
                if dt >= reach {
                    break;
                }
                let bin = (dt + half).div_euclid(self.bin_ps);
                if bin.abs() <= self.half_bins {
                    self.counts[(bin + self.half_bins) as usize] += 1;
                }
                k += 1;
            }
        }
        if duration > 0.0 {
            self.expected += ch0.len() as f64 * ch1.len() as f64 * (self.bin_ps as f64 * 1e-12) / duration;
        }
    }

    pub fn finish(&self) -> Correlation {
        let norm = self.expected;
        let tau = (-self.half_bins..=self.half_bins)
            .map(|k| k as f64 * self.bin_ps as f64 * 1e-12)
            .collect();
        let (g2, error) = if norm > 0.0 {
            self.counts
                .iter()
                .map(|&c| (c as f64 / norm, (c as f64).max(1.0).sqrt() / norm))
                .unzip()
        } else {
            (vec![0.0; self.counts.len()], vec![0.0; self.counts.len()])
        };
        Correlation { tau, g2, error, counts: self.counts.clone(), uncorrelated_level: norm }
    }
}

/// One-shot correlation of two complete streams.
pub fn correlate(ch0: &[u64], ch1: &[u64], duration: f64, bin: f64, window: f64) -> Correlation {
    let mut c = Correlator::new(bin, window);
    c.add_chunk(ch0, ch1, duration);
    c.finish()
}
