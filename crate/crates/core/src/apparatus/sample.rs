use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::rng::{label, rng_for};
use crate::spin::{NuclearSpecies, GAMMA_C13};

/// Nitrogen-15 axial hyperfine, Hz.
pub const N15_A_PAR: f64 = 3.03e6;
/// Nearest-neighbour 13C axial hyperfine, Hz.
pub const C13_A_PAR: f64 = 14e6;
/// Chance that an implanted NV has a 13C on a nearest-neighbour site.
pub const C13_NEIGHBOUR_FRACTION: f64 = 0.09;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NvCenter {
    pub id: u32,
    /// µm, lab frame.
    pub position: [f64; 3],
    /// Index of the ⟨111⟩ axis, 0..4.
    pub orientation: u8,
    pub nuclear: NuclearSpecies,
    pub brightness: f64,
    /// s.
    pub t2_star: f64,
    /// Echo collapse time, s.
    pub tc: f64,
    /// Weight of the Larmor-periodic part of the bath, 0..1.
    pub revival_depth: f64,
    /// s.
    pub t1: f64,
}

impl NvCenter {
    pub fn new(id: u32, position: [f64; 3]) -> Self {
        Self {
            id,
            position,
            orientation: 0,
            nuclear: NuclearSpecies::None,
            brightness: 1.0,
            t2_star: 2e-6,
            tc: 10e-6,
            revival_depth: 1.0,
            t1: 6e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    /// Shallow implanted plane, 15N, long coherence.
    Implanted,
    /// Random 3-D native NVs, shorter collapse time.
    Hpht,
    /// Sparse native NVs.
    CvdNative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMap {
    pub nvs: Vec<NvCenter>,
    /// Uniform fluorescence background at the detector, Hz.
    pub background_rate: f64,
    /// Box `[0, extent]` per axis, µm.
    pub extent: [f64; 3],
    pub seed: u64,
}

impl SampleMap {
    pub fn validate(&self) -> Result<(), String> {
        for nv in &self.nvs {
            let inside = (0..3).all(|i| (0.0..=self.extent[i]).contains(&nv.position[i]));
            if !inside {
                return Err(format!("NV {} at {:?} lies outside the sample", nv.id, nv.position));
            }
            if !(nv.brightness > 0.0) || !(nv.t2_star > 0.0 && nv.tc > 0.0 && nv.t1 > 0.0) {
                return Err(format!("NV {} has non-positive brightness or coherence times", nv.id));
            }
            if nv.orientation > 3 || !(0.0..=1.0).contains(&nv.revival_depth) {
                return Err(format!("NV {} has invalid orientation or revival depth", nv.id));
            }
        }
        if self.background_rate < 0.0 {
            return Err("background rate must be non-negative".into());
        }
        Ok(())
    }

    pub fn nv(&self, id: u32) -> Option<&NvCenter> {
        self.nvs.iter().find(|n| n.id == id)
    }

    /// Random sample of the given kind. Lateral window `[x0, x0 + w]` and
    /// `[y0, y0 + w]`, µm.
    pub fn generate(kind: SampleKind, seed: u64, origin: [f64; 2], width: f64, extent: [f64; 3]) -> SampleMap {
        let mut rng = rng_for(seed, &[label("sample")]);
        // NVs per µm² of window.
        let (density, depth_range, background) = match kind {
            SampleKind::Implanted => (0.08, (9.9, 10.1), 2e3),
            SampleKind::Hpht => (0.25, (5.0, 15.0), 6e3),
            SampleKind::CvdNative => (0.01, (5.0, 15.0), 1e3),
        };
        let mean = density * width * width;
        let count = Poisson::new(mean.max(1e-9)).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        let mut nvs = Vec::with_capacity(count);
        for id in 0..count {
            let pos = [
                origin[0] + rng.random::<f64>() * width,
                origin[1] + rng.random::<f64>() * width,
                rng.random_range(depth_range.0..depth_range.1),
            ];
            let mut nv = NvCenter::new(id as u32, pos);
            nv.orientation = rng.random_range(0..4);
            nv.brightness = rng.random_range(0.8..1.2);
            match kind {
                SampleKind::Implanted => {
                    nv.t2_star = rng.random_range(1.0e-6..2.5e-6);
                    nv.tc = rng.random_range(9e-6..13e-6);
                    nv.nuclear = if rng.random::<f64>() < C13_NEIGHBOUR_FRACTION {
                        NuclearSpecies::C13 { a_par: C13_A_PAR, gamma_n: GAMMA_C13 }
                    } else {
                        NuclearSpecies::N15 { a_par: N15_A_PAR }
                    };
                }
                SampleKind::Hpht => {
                    nv.t2_star = rng.random_range(0.3e-6..1.0e-6);
                    nv.tc = rng.random_range(2e-6..5e-6);
                }
                SampleKind::CvdNative => {
                    nv.t2_star = rng.random_range(2e-6..5e-6);
                    nv.tc = rng.random_range(15e-6..30e-6);
                }
            }
            nvs.push(nv);
        }
        SampleMap { nvs, background_rate: background, extent, seed }
    }
}
