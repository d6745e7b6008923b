//! The simulated bench: sample, optics, magnet, MW chain, detectors, drift,
//! and the exclusive session an experiment drives them through.

mod detector;
mod executor;
mod magnet;
mod optics;
mod presets;
mod sample;
mod session;

pub use detector::{dead_time_filter, detect, DetectorProfile};
pub use executor::{gate_exposure, pattern_response, DriveSettings, GateSource, NvModel, PatternResponse};
pub use magnet::{field_at_sample, from_nv_frame, nv_axis, nv_frame, to_nv_frame, MagnetConfig, MagnetState, MAGIC_ANGLE_DEG};
pub use optics::{aperture_ok, ApertureCheck, OpticsProfile, Pcb, FWHM_PER_SIGMA};
pub use presets::{Preset, C13_B_AXIAL, C13_B_PERP, FOCUS, N15_ECHO_A_PAR, N15_ECHO_DETUNING, PRESETS};
pub use sample::{NvCenter, SampleKind, SampleMap, C13_A_PAR, C13_NEIGHBOUR_FRACTION, N15_A_PAR};
pub use session::{
    replay_log, Apparatus, Command, CommandLog, CommandOutput, GateCounts, LogEntry, Session, COMMAND_LOG_SCHEMA,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::photophysics::{PhotoError, RateParams, Saturation, REFERENCE_POWER_UW};
use crate::pulse::{DelayCalibration, PulseError};
use crate::spin::{Dephasing, SpinBath, SpinError, SpinParams, GAMMA_C13};

pub const APPARATUS_SCHEMA: &str = "nvlab.apparatus/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApparatusError {
    #[error("apparatus session is held by another client")]
    SessionBusy,
    #[error("no pattern armed")]
    NoPatternArmed,
    #[error("invalid apparatus config: {0}")]
    Config(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("replay mismatch: {0}")]
    Replay(String),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Photo(#[from] PhotoError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

/// Source power to Rabi frequency: `Ω = k √P`, with P in mW after the amplifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MwChain {
    pub amplifier_gain_db: f64,
    /// Hz per √mW at the antenna.
    pub rabi_per_sqrt_mw: f64,
    /// Source limits, dBm.
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl Default for MwChain {
    fn default() -> Self {
        // 0 dBm into 45 dB of gain gives a 100 ns π pulse.
        let gain = 45.0;
        Self { amplifier_gain_db: gain, rabi_per_sqrt_mw: 5e6 / 10f64.powf(gain / 20.0), min_dbm: -60.0, max_dbm: 20.0 }
    }
}

impl MwChain {
    pub fn rabi_for(&self, source_dbm: f64) -> f64 {
        self.rabi_per_sqrt_mw * 10f64.powf((source_dbm + self.amplifier_gain_db) / 20.0)
    }

    pub fn power_for_rabi(&self, rabi: f64) -> f64 {
        20.0 * (rabi / self.rabi_per_sqrt_mw).log10() - self.amplifier_gain_db
    }
}

/// Random walk of the sample relative to the focus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    /// Per axis, µm per √min.
    pub sigma_um_per_sqrt_min: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self { sigma_um_per_sqrt_min: 0.020 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserSettings {
    pub power_uw: f64,
    pub gate: GateSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MwSettings {
    pub frequency: f64,
    pub power_dbm: f64,
    pub gate: GateSource,
}

/// Everything a client can set directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Commanded piezo position, µm.
    pub stage: [f64; 3],
    pub magnet: MagnetState,
    pub laser: LaserSettings,
    pub mw: MwSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            stage: [100.0, 100.0, 10.0],
            magnet: MagnetState { distance: 200.0, theta: 0.0, phi: 0.0 },
            laser: LaserSettings { power_uw: REFERENCE_POWER_UW, gate: GateSource::On },
            mw: MwSettings { frequency: 2.87e9, power_dbm: 0.0, gate: GateSource::Off },
        }
    }
}

/// Full instrument state, as reported to clients and stored with datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusState {
    pub settings: Settings,
    /// Lab-frame field at the sample, T.
    pub field: [f64; 3],
    /// Sample displacement accumulated by drift, µm.
    pub drift_offset: [f64; 3],
    /// Simulated time, s.
    pub clock: f64,
    pub seed: u64,
    /// Hash of the IR behind the armed pattern.
    pub armed: Option<String>,
    pub stage_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusConfig {
    pub schema_version: String,
    pub sample: SampleMap,
    #[serde(default)]
    pub optics: OpticsProfile,
    #[serde(default)]
    pub detector: DetectorProfile,
    #[serde(default)]
    pub magnet: MagnetConfig,
    #[serde(default)]
    pub mw: MwChain,
    #[serde(default)]
    pub rates: RateParams,
    #[serde(default)]
    pub saturation: Saturation,
    /// Actual channel latencies of the bench.
    #[serde(default)]
    pub latency: DelayCalibration,
    #[serde(default)]
    pub drift: DriftModel,
    /// Piezo travel per axis, µm.
    #[serde(default = "default_stage_range")]
    pub stage_range: f64,
    #[serde(default)]
    pub initial: Settings,
}

fn default_stage_range() -> f64 {
    200.0
}

impl ApparatusConfig {
    pub fn new(sample: SampleMap) -> Self {
        Self {
            schema_version: APPARATUS_SCHEMA.into(),
            sample,
            optics: OpticsProfile::default(),
            detector: DetectorProfile::default(),
            magnet: MagnetConfig::default(),
            mw: MwChain::default(),
            rates: RateParams::default(),
            saturation: Saturation::default(),
            latency: DelayCalibration::default(),
            drift: DriftModel::default(),
            stage_range: default_stage_range(),
            initial: Settings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ApparatusError> {
        let bad = |m: String| ApparatusError::Config(m);
        if self.schema_version != APPARATUS_SCHEMA {
            return Err(bad(format!("schema {:?}, expected {APPARATUS_SCHEMA:?}", self.schema_version)));
        }
        self.sample.validate().map_err(bad)?;
        self.optics.validate().map_err(bad)?;
        self.detector.validate().map_err(bad)?;
        self.rates.validate()?;
        self.latency.validate()?;
        if !(self.stage_range > 0.0) || !(self.drift.sigma_um_per_sqrt_min >= 0.0) {
            return Err(bad("stage range must be positive and drift non-negative".into()));
        }
        if !(self.mw.rabi_per_sqrt_mw > 0.0) || !(self.mw.min_dbm < self.mw.max_dbm) {
            return Err(bad("MW chain needs a positive gain constant and min < max power".into()));
        }
        if !(self.magnet.b_ref > 0.0 && self.magnet.d_ref > 0.0 && self.magnet.d_min > 0.0) {
            return Err(bad("magnet constants must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ApparatusError> {
        let c: Self = toml::from_str(text).map_err(|e| ApparatusError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Spin Hamiltonian, dephasing and rates for one NV under the given
    /// lab-frame field and laser power, with collection scaled by `weight`.
    pub fn nv_model(&self, nv: &NvCenter, field: [f64; 3], power_uw: f64, weight: f64) -> NvModel {
        let b = to_nv_frame(field, nv.orientation);
        let params = SpinParams::default().with_field(b).with_nuclear(nv.nuclear);
        let bmag = params.field_magnitude();
        let dephasing = Dephasing {
            t2_star: nv.t2_star,
            t1: Some(nv.t1),
            bath: Some(SpinBath { tc: nv.tc, larmor: GAMMA_C13 * bmag, revival_depth: nv.revival_depth }),
        };
        let mut rates = self.rates.with_pump(self.saturation.pump_rate(power_uw));
        rates.collection_efficiency *= weight * nv.brightness;
        rates.background_rate = 0.0;
        NvModel { params, dephasing, rates }
    }
}
