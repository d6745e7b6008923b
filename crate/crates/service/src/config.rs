use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nvlab_core::apparatus::{ApparatusConfig, Preset};
use nvlab_core::experiment::Backend;

use crate::error::Error;

pub const SERVICE_SCHEMA: &str = "nvlab.service/1";
/// Environment variable naming the service config file.
pub const CONFIG_ENV: &str = "NVLAB_CONFIG";

/// `nvlab.toml`. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub schema_version: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Apparatus config file. When absent the `preset` bench is used.
    #[serde(default)]
    pub apparatus: Option<PathBuf>,
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub default_backend: Backend,
    /// Apparatus seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Bearer token required on every request when set.
    #[serde(default)]
    pub token: Option<String>,
}

fn default_listen() -> String {
    "127.0.0.1:8650".into()
}
fn default_preset() -> String {
    "survey".into()
}
fn default_data_dir() -> PathBuf {
    "nvlab-data".into()
}
fn default_seed() -> u64 {
    1
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            schema_version: SERVICE_SCHEMA.into(),
            listen: default_listen(),
            apparatus: None,
            preset: default_preset(),
            data_dir: default_data_dir(),
            default_backend: Backend::default(),
            seed: default_seed(),
            token: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let version: Option<String> = toml::from_str::<toml::Table>(text)
            .map_err(|e| Error::Config(e.to_string()))?
            .get("schema_version")
            .and_then(|v| v.as_str().map(String::from));
        match version.as_deref() {
            Some(SERVICE_SCHEMA) => {}
            Some(v) => return Err(Error::Schema { found: v.into(), expected: SERVICE_SCHEMA }),
            None => return Err(Error::Config(format!("missing schema_version, expected {SERVICE_SCHEMA:?}"))),
        }
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.listen_addr()?;
        Ok(c)
    }

    /// Reads `path`, or the file named by `NVLAB_CONFIG`, or falls back to
    /// defaults when neither is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::ConfigNotFound(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.data_dir = base.join(&c.data_dir);
        c.apparatus = c.apparatus.map(|p| base.join(p));
        Ok(c)
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, Error> {
        self.listen.parse().map_err(|_| Error::Config(format!("invalid listen address {:?}", self.listen)))
    }

    pub fn apparatus_config(&self) -> Result<ApparatusConfig, Error> {
        match &self.apparatus {
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Error::ConfigNotFound(format!("{}: {e}", p.display())))?;
                ApparatusConfig::from_toml(&text).map_err(|e| Error::Config(e.to_string()))
            }
            None => Preset::by_name(&self.preset)
                .map(Preset::config)
                .ok_or_else(|| Error::Config(format!("unknown preset {:?}", self.preset))),
        }
    }

    /// Creates the data directory and checks it accepts writes.
    pub fn prepare_data_dir(&self) -> Result<(), Error> {
        let probe = self.data_dir.join(".write-test");
        fs::create_dir_all(&self.data_dir)
            .and_then(|_| fs::write(&probe, b""))
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| Error::Config(format!("data directory {} is not writable: {e}", self.data_dir.display())))
    }
}
