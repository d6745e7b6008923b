//! End-to-end labs against an apparatus session: sweeps, normalization,
//! tracking, and dataset assembly.

mod dataset;
mod runners;
mod spec;
mod track;

pub use dataset::{Axis, Dataset, DatasetStore, Metadata, RawGates, StoreError, DATASET_SCHEMA};
pub use spec::{Backend, DdScheme, Experiment, ExperimentSpec, DEFAULT_REPETITIONS, EXPERIMENT_SCHEMA};
pub use track::{track_nv, TrackResult, TRACK_MIN_SNR};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::FitError;
use crate::apparatus::{Apparatus, ApparatusConfig, ApparatusError, Session};
use crate::pulse::PulseError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("scan window outside the stage range: {0}")]
    WindowOutOfRange(String),
    #[error("lost the NV while tracking (peak SNR {snr:.2})")]
    TrackLost { snr: f64 },
    #[error("g² needs two detector channels behind a splitter")]
    SingleChannel,
    #[error("π calibration failed: {0}")]
    Calibration(FitError),
    #[error("replay produced a different dataset: {0}")]
    ReplayMismatch(String),
    #[error(transparent)]
    Apparatus(#[from] ApparatusError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

/// Events streamed while a run is in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Progress {
    Started { kind: String, points: usize },
    Point { index: usize, x: f64, y: f64, error: f64 },
    Pixel { ix: usize, iy: usize, x: f64, y: f64, rate: f64 },
    Acquired { elapsed: f64, total: f64 },
    Note { message: String },
}

/// What a runner measured, before metadata is attached.
pub(crate) struct Measured {
    pub axis: Axis,
    pub axis2: Option<Axis>,
    pub signal_name: &'static str,
    pub signal_unit: &'static str,
    pub signal: Vec<f64>,
    pub error: Vec<f64>,
    pub raw: Option<RawGates>,
    pub normalization: &'static str,
    pub complete: bool,
}

pub(crate) struct Ctx<'a> {
    pub s: &'a mut Session,
    pub spec: &'a ExperimentSpec,
    pub progress: &'a mut dyn FnMut(&Progress),
    pub warnings: Vec<String>,
    pub derived: BTreeMap<String, f64>,
}

impl Ctx<'_> {
    pub fn emit(&mut self, p: Progress) {
        (self.progress)(&p);
    }

    pub fn cancelled(&self) -> bool {
        self.s.cancel_requested()
    }
}

pub fn config_hash(c: &ApparatusConfig) -> String {
    spec::hex(&Sha256::digest(serde_json::to_vec(c).expect("config serializes")))
}

/// Runs `spec` on the session. Everything random is drawn from the spec's
/// seed, so the result depends only on the starting state, the config and
/// the spec. A cancelled run returns a truncated dataset with
/// `complete == false`.
pub fn run_experiment(
    s: &mut Session,
    spec: &ExperimentSpec,
    progress: &mut dyn FnMut(&Progress),
) -> Result<Dataset, ExperimentError> {
    spec.validate()?;
    s.reset_log(spec.seed);
    let start = s.snapshot();
    let config = s.config();
    let mut ctx = Ctx { s, spec, progress, warnings: Vec::new(), derived: BTreeMap::new() };
    let m = runners::dispatch(&mut ctx)?;
    let Ctx { s, warnings, derived, .. } = ctx;
    let log = s.log();
    let mut h = Sha256::new();
    for e in &log.entries {
        h.update(e.digest.as_bytes());
    }
    let metadata = Metadata {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        config_hash: config_hash(&config),
        seed: spec.seed,
        clock_start: start.clock,
        clock_end: s.snapshot().clock,
        commands: log.entries.len(),
        log_digest: spec::hex(&h.finalize()),
        apparatus: start,
    };
    let mut d = Dataset {
        schema: DATASET_SCHEMA.into(),
        id: String::new(),
        kind: spec.experiment.kind().into(),
        axis: m.axis,
        axis2: m.axis2,
        signal_name: m.signal_name.into(),
        signal_unit: m.signal_unit.into(),
        signal: m.signal,
        error: m.error,
        raw: m.raw,
        normalization: m.normalization.into(),
        complete: m.complete,
        derived,
        warnings,
        metadata,
    };
    d.id = d.compute_id();
    Ok(d)
}

/// Rebuilds `dataset` on a fresh apparatus from its recorded spec, config
/// and starting state, and checks the result is byte-identical.
pub fn replay(config: &ApparatusConfig, dataset: &Dataset) -> Result<Dataset, ExperimentError> {
    if config_hash(config) != dataset.metadata.config_hash {
        return Err(ExperimentError::ReplayMismatch("apparatus config differs from the recorded one".into()));
    }
    let app = Apparatus::new(config.clone(), dataset.metadata.seed)?;
    let mut s = app.session()?;
    s.restore(&dataset.metadata.apparatus)?;
    let again = run_experiment(&mut s, &dataset.metadata.spec, &mut |_| {})?;
    if again.to_json() != dataset.to_json() {
        let why = if again.metadata.log_digest != dataset.metadata.log_digest {
            "command sequence or outputs differ"
        } else {
            "dataset content differs"
        };
        return Err(ExperimentError::ReplayMismatch(why.into()));
    }
    Ok(again)
}
