use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::hex;
use super::ExperimentSpec;
use crate::apparatus::{ApparatusState, CommandLog};

pub const DATASET_SCHEMA: &str = "nvlab.dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: &str, unit: &str, values: Vec<f64>) -> Self {
        Self { name: name.into(), unit: unit.into(), values }
    }
}

/// Summed gate counts per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RawGates {
    pub signal: Vec<u64>,
    pub reference: Vec<u64>,
    pub repetitions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    pub config_hash: String,
    /// Instrument state when the run started.
    pub apparatus: ApparatusState,
    pub seed: u64,
    /// Simulated clock at start and end, s.
    pub clock_start: f64,
    pub clock_end: f64,
    pub commands: usize,
    /// Hash over the digests of every command the run issued.
    pub log_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema: String,
    pub id: String,
    pub kind: String,
    pub axis: Axis,
    /// Second axis of an image; `signal` is then row-major over (axis2, axis).
    #[serde(default)]
    pub axis2: Option<Axis>,
    pub signal_name: String,
    pub signal_unit: String,
    pub signal: Vec<f64>,
    pub error: Vec<f64>,
    #[serde(default)]
    pub raw: Option<RawGates>,
    pub normalization: String,
    /// False when the run was cancelled and the arrays are truncated.
    pub complete: bool,
    #[serde(default)]
    pub derived: BTreeMap<String, f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub metadata: Metadata,
}

impl Dataset {
    /// Content address over everything that determines the data.
    pub fn compute_id(&self) -> String {
        let m = &self.metadata;
        let mut h = Sha256::new();
        for part in [&m.spec_hash, &m.config_hash, &m.log_digest] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        h.update(serde_json::to_vec(&m.apparatus).expect("state serializes"));
        h.update([u8::from(self.complete)]);
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema != DATASET_SCHEMA {
            return Err(format!("schema {:?}, expected {DATASET_SCHEMA:?}", self.schema));
        }
        let points = self.axis.values.len() * self.axis2.as_ref().map_or(1, |a| a.values.len());
        if self.signal.len() != self.error.len() {
            return Err("signal and error lengths differ".into());
        }
        if self.complete && self.signal.len() != points {
            return Err(format!("{} signal values for {points} axis points", self.signal.len()));
        }
        if self.signal.len() > points {
            return Err("more signal values than axis points".into());
        }
        if let Some(r) = &self.raw {
            if r.signal.len() != self.signal.len() || r.reference.len() != self.signal.len() {
                return Err("raw gate arrays do not match the signal".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let d: Dataset = serde_json::from_str(text).map_err(|e| e.to_string())?;
        d.validate()?;
        Ok(d)
    }

    /// Points actually measured, paired with their axis values.
    pub fn xy(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.signal.len();
        (self.axis.values[..n.min(self.axis.values.len())].to_vec(), self.signal.clone())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let col = |a: &Axis| if a.unit.is_empty() { a.name.clone() } else { format!("{}_{}", a.name, a.unit) };
        let sig = if self.signal_unit.is_empty() { self.signal_name.clone() } else { format!("{}_{}", self.signal_name, self.signal_unit) };
        match &self.axis2 {
            Some(a2) => {
                let _ = writeln!(out, "{},{},{sig},error", col(&self.axis), col(a2));
                let nx = self.axis.values.len();
                for (k, (s, e)) in self.signal.iter().zip(&self.error).enumerate() {
                    let _ = writeln!(out, "{},{},{s},{e}", self.axis.values[k % nx], a2.values[k / nx]);
                }
            }
            None => {
                let raw = self.raw.as_ref();
                let _ = write!(out, "{},{sig},error", col(&self.axis));
                if raw.is_some() {
                    out.push_str(",signal_counts,reference_counts");
                }
                out.push('\n');
                for (k, (s, e)) in self.signal.iter().zip(&self.error).enumerate() {
                    let _ = write!(out, "{},{s},{e}", self.axis.values[k]);
                    if let Some(r) = raw {
                        let _ = write!(out, ",{},{}", r.signal[k], r.reference[k]);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub enum StoreError {
    Io(io::Error),
    /// A different dataset already lives under this id.
    Conflict(String),
    NotFound(String),
    Corrupt(String),
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::Io(e) => write!(f, "dataset store I/O: {e}"),
            StoreError::Conflict(id) => write!(f, "dataset {id} exists with different content"),
            StoreError::NotFound(id) => write!(f, "no dataset {id}"),
            StoreError::Corrupt(m) => write!(f, "corrupt dataset: {m}"),
        }
    }
}

impl std::error::Error for StoreError {}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e)
    }
}

/// Datasets on disk as `<id>.json` plus `<id>.csv`. Files are written once.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    dir: PathBuf,
}

impl DatasetStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self { dir: dir.as_ref().to_path_buf() })
    }

    fn path(&self, id: &str, ext: &str) -> Result<PathBuf, StoreError> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StoreError::NotFound(id.into()));
        }
        Ok(self.dir.join(format!("{id}.{ext}")))
    }

    /// Stores `d`. Saving identical content again is a no-op.
    pub fn save(&self, d: &Dataset) -> Result<PathBuf, StoreError> {
        let path = self.path(&d.id, "json")?;
        let json = d.to_json();
        if path.exists() {
            return if fs::read_to_string(&path)? == json { Ok(path) } else { Err(StoreError::Conflict(d.id.clone())) };
        }
        let tmp = self.dir.join(format!(".{}.tmp", d.id));
        fs::write(&tmp, &json)?;
        fs::write(self.path(&d.id, "csv")?, d.to_csv())?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(&self, id: &str) -> Result<Dataset, StoreError> {
        let path = self.path(id, "json")?;
        if !path.exists() {
            return Err(StoreError::NotFound(id.into()));
        }
        Dataset::from_json(&fs::read_to_string(path)?).map_err(StoreError::Corrupt)
    }

    pub fn load_csv(&self, id: &str) -> Result<String, StoreError> {
        let path = self.path(id, "csv")?;
        if !path.exists() {
            return Err(StoreError::NotFound(id.into()));
        }
        Ok(fs::read_to_string(path)?)
    }

    /// Keeps the command log that produced dataset `id` beside it.
    pub fn save_log(&self, id: &str, log: &CommandLog) -> Result<PathBuf, StoreError> {
        let path = self.path(id, "commands.json")?;
        let json = serde_json::to_string_pretty(log).expect("log serializes");
        if path.exists() {
            return if fs::read_to_string(&path)? == json { Ok(path) } else { Err(StoreError::Conflict(id.into())) };
        }
        fs::write(&path, json)?;
        Ok(path)
    }

    pub fn load_log(&self, id: &str) -> Result<CommandLog, StoreError> {
        let path = self.path(id, "commands.json")?;
        if !path.exists() {
            return Err(StoreError::NotFound(id.into()));
        }
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| StoreError::Corrupt(e.to_string()))
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(String::from))
            .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_hexdigit()))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
