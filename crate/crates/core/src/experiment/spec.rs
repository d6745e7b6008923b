use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apparatus::C13_A_PAR;
use crate::pulse::{BackendProfile, DelayCalibration, Layout};

use super::ExperimentError;

pub const EXPERIMENT_SCHEMA: &str = "nvlab.experiment/1";

/// Default repetitions per sweep point. With about 0.03 detected photons per
/// gate and repetition and a 30 % contrast, `2 (5 / C)² / n` repetitions put
/// the point error below a fifth of the contrast; 50 000 covers that.
pub const DEFAULT_REPETITIONS: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// 100 MS/s, 1024-sample pattern buffer.
    Discovery,
    /// 500 MS/s, unbounded pattern length.
    #[default]
    Pulseblaster,
}

impl Backend {
    pub fn profile(self) -> BackendProfile {
        match self {
            Backend::Discovery => BackendProfile::discovery(),
            Backend::Pulseblaster => BackendProfile::pulseblaster(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdScheme {
    Cpmg,
    Xy4,
}

fn d_dwell() -> f64 {
    0.01
}
fn d_track_dwell() -> f64 {
    0.005
}
fn d_tolerance() -> f64 {
    0.01
}
fn d_iterations() -> usize {
    5
}
fn d_bin() -> f64 {
    0.5e-9
}
fn d_window() -> f64 {
    100e-9
}
fn d_chunk() -> f64 {
    1.0
}
fn d_odmr_dwell() -> f64 {
    0.1
}
fn d_odmr_period() -> f64 {
    20e-6
}
fn d_hyperfine() -> f64 {
    C13_A_PAR
}

/// Per-lab parameters. Times in s, frequencies in Hz, positions in µm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Raster in the plane `z = origin[2]`, row-major in y then x.
    ConfocalScan {
        origin: [f64; 3],
        width: f64,
        height: f64,
        step: f64,
        #[serde(default = "d_dwell")]
        dwell: f64,
    },
    Track {
        guess: [f64; 3],
        #[serde(default = "d_tolerance")]
        tolerance: f64,
        #[serde(default = "d_iterations")]
        max_iterations: usize,
        #[serde(default = "d_track_dwell")]
        dwell: f64,
    },
    G2 {
        duration: f64,
        #[serde(default = "d_bin")]
        bin: f64,
        #[serde(default = "d_window")]
        window: f64,
        #[serde(default = "d_chunk")]
        chunk: f64,
    },
    CwOdmr {
        frequencies: Vec<f64>,
        #[serde(default)]
        power_dbm: Option<f64>,
        #[serde(default = "d_odmr_dwell")]
        dwell: f64,
        #[serde(default = "d_odmr_period")]
        period: f64,
    },
    PulsedOdmr {
        frequencies: Vec<f64>,
        #[serde(default)]
        pi: Option<f64>,
        #[serde(default)]
        power_dbm: Option<f64>,
    },
    Rabi {
        durations: Vec<f64>,
        frequency: f64,
        #[serde(default)]
        power_dbm: Option<f64>,
    },
    Ramsey {
        taus: Vec<f64>,
        frequency: f64,
        #[serde(default)]
        pi: Option<f64>,
        #[serde(default)]
        power_dbm: Option<f64>,
    },
    HahnEcho {
        taus: Vec<f64>,
        frequency: f64,
        #[serde(default)]
        pi: Option<f64>,
        #[serde(default)]
        power_dbm: Option<f64>,
    },
    DynDecoupling {
        taus: Vec<f64>,
        frequency: f64,
        scheme: DdScheme,
        /// π pulses for CPMG, cycles for XY4.
        count: usize,
        #[serde(default)]
        pi: Option<f64>,
        #[serde(default)]
        power_dbm: Option<f64>,
    },
    T1 {
        taus: Vec<f64>,
    },
    NuclearPrecession {
        waits: Vec<f64>,
        /// Nuclear-selective line.
        frequency: f64,
        /// Selective π pulse length.
        pi: f64,
        #[serde(default)]
        power_dbm: Option<f64>,
        /// Nuclear Larmor frequency; taken from the magnet field if absent.
        #[serde(default)]
        larmor: Option<f64>,
        #[serde(default = "d_hyperfine")]
        hyperfine: f64,
    },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::ConfocalScan { .. } => "confocal_scan",
            Experiment::Track { .. } => "track",
            Experiment::G2 { .. } => "g2",
            Experiment::CwOdmr { .. } => "cw_odmr",
            Experiment::PulsedOdmr { .. } => "pulsed_odmr",
            Experiment::Rabi { .. } => "rabi",
            Experiment::Ramsey { .. } => "ramsey",
            Experiment::HahnEcho { .. } => "hahn_echo",
            Experiment::DynDecoupling { .. } => "dyn_decoupling",
            Experiment::T1 { .. } => "t1",
            Experiment::NuclearPrecession { .. } => "nuclear_precession",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: String,
    pub seed: u64,
    #[serde(default)]
    pub backend: Backend,
    /// Per sweep point; see [`DEFAULT_REPETITIONS`].
    #[serde(default)]
    pub repetitions: Option<u64>,
    /// Latencies the compiler compensates for.
    #[serde(default)]
    pub calibration: DelayCalibration,
    #[serde(default)]
    pub layout: Layout,
    /// Re-track the NV before a sweep point once this much simulated time
    /// (s) has passed since the last track. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_every: Option<f64>,
    pub experiment: Experiment,
}

fn positive(v: f64, what: &str) -> Result<(), ExperimentError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ExperimentError::Invalid(format!("{what} must be positive, got {v}")))
    }
}

fn times(v: &[f64], what: &str) -> Result<(), ExperimentError> {
    if v.is_empty() {
        return Err(ExperimentError::Invalid(format!("{what} list is empty")));
    }
    if v.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(ExperimentError::Invalid(format!("{what} values must be non-negative")));
    }
    Ok(())
}

fn frequencies(v: &[f64]) -> Result<(), ExperimentError> {
    if v.is_empty() {
        return Err(ExperimentError::Invalid("frequency list is empty".into()));
    }
    if v.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(ExperimentError::Invalid("frequencies must be positive".into()));
    }
    if v.windows(2).any(|w| w[1] < w[0]) {
        return Err(ExperimentError::Invalid("frequency list must be sorted".into()));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn new(seed: u64, experiment: Experiment) -> Self {
        Self {
            schema: EXPERIMENT_SCHEMA.into(),
            seed,
            backend: Backend::default(),
            repetitions: None,
            calibration: DelayCalibration::default(),
            layout: Layout::default(),
            track_every: None,
            experiment,
        }
    }

    pub fn with_backend(mut self, b: Backend) -> Self {
        self.backend = b;
        self
    }

    pub fn with_repetitions(mut self, r: u64) -> Self {
        self.repetitions = Some(r);
        self
    }

    pub fn with_layout(mut self, l: Layout) -> Self {
        self.layout = l;
        self
    }

    pub fn with_tracking(mut self, every: f64) -> Self {
        self.track_every = Some(every);
        self
    }

    pub fn repetitions(&self) -> u64 {
        self.repetitions.unwrap_or(DEFAULT_REPETITIONS)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(ExperimentError::Invalid(format!(
                "schema {:?}, expected {EXPERIMENT_SCHEMA:?}",
                self.schema
            )));
        }
        if self.repetitions == Some(0) {
            return Err(ExperimentError::Invalid("repetitions must be at least 1".into()));
        }
        self.calibration.validate()?;
        if let Some(t) = self.track_every {
            positive(t, "tracking interval")?;
        }
        let opt = |p: &Option<f64>, what: &str| p.map_or(Ok(()), |v| positive(v, what));
        match &self.experiment {
            Experiment::ConfocalScan { origin, width, height, step, dwell } => {
                if origin.iter().any(|v| !v.is_finite()) || !(*width >= 0.0) || !(*height >= 0.0) {
                    return Err(ExperimentError::Invalid("scan window must be finite and non-negative".into()));
                }
                positive(*step, "step")?;
                positive(*dwell, "dwell")?;
            }
            Experiment::Track { guess, tolerance, max_iterations, dwell } => {
                if guess.iter().any(|v| !v.is_finite()) || *max_iterations == 0 {
                    return Err(ExperimentError::Invalid("track needs a finite guess and ≥ 1 iteration".into()));
                }
                positive(*tolerance, "tolerance")?;
                positive(*dwell, "dwell")?;
            }
            Experiment::G2 { duration, bin, window, chunk } => {
                positive(*duration, "duration")?;
                positive(*bin, "bin")?;
                positive(*window, "window")?;
                positive(*chunk, "chunk")?;
            }
            Experiment::CwOdmr { frequencies: f, dwell, period, .. } => {
                frequencies(f)?;
                positive(*dwell, "dwell")?;
                positive(*period, "period")?;
                if dwell < period {
                    return Err(ExperimentError::Invalid("dwell shorter than one chopping period".into()));
                }
            }
            Experiment::PulsedOdmr { frequencies: f, pi, .. } => {
                frequencies(f)?;
                opt(pi, "π")?;
            }
            Experiment::Rabi { durations, frequency, .. } => {
                times(durations, "duration")?;
                positive(*frequency, "frequency")?;
            }
            Experiment::Ramsey { taus, frequency, pi, .. } | Experiment::HahnEcho { taus, frequency, pi, .. } => {
                times(taus, "tau")?;
                positive(*frequency, "frequency")?;
                opt(pi, "π")?;
            }
            Experiment::DynDecoupling { taus, frequency, pi, count, .. } => {
                times(taus, "tau")?;
                positive(*frequency, "frequency")?;
                opt(pi, "π")?;
                if *count == 0 {
                    return Err(ExperimentError::Invalid("pulse count must be at least 1".into()));
                }
            }
            Experiment::T1 { taus } => times(taus, "tau")?,
            Experiment::NuclearPrecession { waits, frequency, pi, larmor, hyperfine, .. } => {
                times(waits, "wait")?;
                positive(*frequency, "frequency")?;
                positive(*pi, "π")?;
                positive(*hyperfine, "hyperfine")?;
                opt(larmor, "larmor")?;
            }
        }
        if let Some(p) = match &self.experiment {
            Experiment::CwOdmr { power_dbm, .. }
            | Experiment::PulsedOdmr { power_dbm, .. }
            | Experiment::Rabi { power_dbm, .. }
            | Experiment::Ramsey { power_dbm, .. }
            | Experiment::HahnEcho { power_dbm, .. }
            | Experiment::DynDecoupling { power_dbm, .. }
            | Experiment::NuclearPrecession { power_dbm, .. } => *power_dbm,
            _ => None,
        } {
            if !p.is_finite() {
                return Err(ExperimentError::Invalid("MW power must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let s: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
