use serde::{Deserialize, Serialize};

use super::{ApparatusConfig, GateSource, MagnetState, NvCenter, SampleKind, SampleMap};
use crate::spin::{field_for_lines, NuclearSpecies, SpinParams, GAMMA_C13, GAUSS};

/// Ready-made benches for the standard labs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Random implanted sample around the stage centre, for confocal scans.
    Survey,
    /// One NV under a slightly misaligned 28 G field.
    Odmr28G,
    /// One NV under an aligned 28 G field.
    Rabi,
    /// One ¹⁵N NV under an aligned 23 G field with a ¹³C bath.
    N15Echo,
    /// One NV with a nearest-neighbour ¹³C in a mostly transverse field.
    C13Nuclear,
    G2Single,
    /// Two NVs inside one focal spot.
    G2Pair,
}

pub const PRESETS: &[(&str, Preset)] = &[
    ("survey", Preset::Survey),
    ("odmr_28g", Preset::Odmr28G),
    ("rabi", Preset::Rabi),
    ("n15_echo", Preset::N15Echo),
    ("c13_nuclear", Preset::C13Nuclear),
    ("g2_single", Preset::G2Single),
    ("g2_pair", Preset::G2Pair),
];

pub const FOCUS: [f64; 3] = [100.0, 100.0, 10.0];

impl Preset {
    pub fn by_name(name: &str) -> Option<Preset> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
    }

    pub fn name(self) -> &'static str {
        PRESETS.iter().find(|(_, p)| *p == self).map(|(n, _)| *n).expect("every preset is listed")
    }

    pub fn config(self) -> ApparatusConfig {
        let single = |nv: NvCenter| SampleMap { nvs: vec![nv], background_rate: 2e3, extent: [200.0; 3], seed: 0 };
        let mut c = match self {
            Preset::Survey => ApparatusConfig::new(SampleMap::generate(
                SampleKind::Implanted,
                1,
                [FOCUS[0] - 5.0, FOCUS[1] - 5.0],
                10.0,
                [200.0; 3],
            )),
            Preset::G2Pair => {
                let a = NvCenter::new(0, FOCUS);
                let b = NvCenter::new(1, [FOCUS[0] + 0.005, FOCUS[1], FOCUS[2]]);
                ApparatusConfig::new(SampleMap { nvs: vec![a, b], ..single(a) })
            }
            Preset::N15Echo => {
                let mut nv = NvCenter::new(0, FOCUS);
                nv.nuclear = NuclearSpecies::N15 { a_par: N15_ECHO_A_PAR };
                nv.t2_star = 1.5e-6;
                nv.tc = 10.7e-6;
                ApparatusConfig::new(single(nv))
            }
            Preset::C13Nuclear => {
                let mut nv = NvCenter::new(0, FOCUS);
                nv.nuclear = NuclearSpecies::C13 { a_par: super::C13_A_PAR, gamma_n: GAMMA_C13 };
                ApparatusConfig::new(single(nv))
            }
            _ => ApparatusConfig::new(single(NvCenter::new(0, FOCUS))),
        };
        c.initial.stage = FOCUS;
        let b_nv = match self {
            Preset::Odmr28G => {
                let (bz, bt) = field_for_lines(&SpinParams::default(), 2.7917e9, 2.9490e9)
                    .expect("the 28 G lines are reachable");
                Some([bt, 0.0, bz])
            }
            Preset::Rabi => Some([0.0, 0.0, 28.0 * GAUSS]),
            Preset::N15Echo => Some([0.0, 0.0, 23.0 * GAUSS]),
            Preset::C13Nuclear => Some([C13_B_PERP, 0.0, C13_B_AXIAL]),
            _ => None,
        };
        if let Some(b) = b_nv {
            c.initial.magnet = MagnetState::for_nv_field(&c.magnet, b, 0);
        }
        c.initial.mw.gate = GateSource::Off;
        c.initial.mw.power_dbm = match self {
            Preset::Rabi | Preset::N15Echo => c.mw.power_for_rabi(13.16e6),
            Preset::C13Nuclear => c.mw.power_for_rabi(1e6),
            // About a 15 % CW dip on resonance.
            _ => 0.0,
        };
        c
    }
}

/// ¹⁵N hyperfine that, with the recommended carrier detuning, puts the
/// Ramsey tones at 7.12 and 4.22 MHz.
pub const N15_ECHO_A_PAR: f64 = 2.90e6;
/// Carrier detuning for that Ramsey lab, Hz.
pub const N15_ECHO_DETUNING: f64 = 5.67e6;
/// Nuclear-lab field in the NV frame, T.
pub const C13_B_PERP: f64 = 80.0 * GAUSS;
pub const C13_B_AXIAL: f64 = 15.0 * GAUSS;
