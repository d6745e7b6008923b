//! `nvlab` subcommands. Results go to stdout as JSON (or text where noted);
//! failures go to stderr as `{"error": {...}}` with a non-zero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use nvlab_core::analysis::ModelKind;
use nvlab_core::apparatus::{replay_log, Apparatus, CommandLog};
use nvlab_core::experiment::{self, run_experiment, Backend, Dataset, DatasetStore, Experiment, ExperimentSpec};
use nvlab_core::photophysics::{calibrate, tags_to_csv, CalibrationTargets};
use nvlab_core::pulse::{compile, timing_diagram, DelayCalibration, SequenceIR};

use crate::api::{fit_points, router, AppState};
use crate::config::{ServiceConfig, CONFIG_ENV};
use crate::error::Error;
use crate::lab::Lab;

#[derive(Debug, Parser)]
#[command(name = "nvlab", version, about = "Simulated NV-centre teaching lab")]
pub struct Cli {
    /// Service config file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Overrides the apparatus seed and, for `run`, the spec's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bench preset, used when the config names no apparatus file.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run one experiment spec on a fresh apparatus and store the dataset.
    Run {
        spec: PathBuf,
        /// Also write the dataset JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Confocal raster scan.
    Scan(ScanArgs),
    /// Fit a stored dataset (file path or id).
    Fit {
        model: ModelKind,
        dataset: String,
        /// Keep only points with the sweep value in `LO,HI`.
        #[arg(long, value_delimiter = ',')]
        range: Option<Vec<f64>>,
        /// Write plot data `x,y,y_fit,residual` here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run a command log and check every output and the dataset it made.
    Replay {
        log: PathBuf,
        /// Dataset to rebuild. Defaults to the `<id>.json` next to the log.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit the intersystem-crossing rates to the polarization and contrast
    /// targets.
    CalibratePhotophysics {
        /// Write the apparatus config with the fitted rates here (TOML).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pulse sequence tools.
    #[command(subcommand)]
    Pulse(PulseCommand),
    /// Record raw photon tags as `channel,timestamp_ps` CSV.
    Tags {
        /// Acquisition time, s.
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Lower-left corner `X,Y,Z` in µm.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 0.0])]
    origin: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    width: f64,
    #[arg(long, default_value_t = 10.0)]
    height: f64,
    #[arg(long, default_value_t = 0.25)]
    step: f64,
    /// Per pixel, s.
    #[arg(long, default_value_t = 0.01)]
    dwell: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PulseCommand {
    /// Compile a sequence IR file to a channel pattern (JSON).
    Compile {
        ir: PathBuf,
        #[arg(long, value_enum, default_value = "pulseblaster")]
        backend: BackendArg,
        /// Latency calibration JSON; zero latencies when absent.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Print an ASCII timing diagram of a sequence IR file.
    Diagram {
        ir: PathBuf,
        #[arg(long, value_enum, default_value = "pulseblaster")]
        backend: BackendArg,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Print the edge list as JSON instead.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum BackendArg {
    Pulseblaster,
    Discovery,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Pulseblaster => Backend::Pulseblaster,
            BackendArg::Discovery => Backend::Discovery,
        }
    }
}

/// What a successful command prints.
pub enum Output {
    Json(Value),
    Text(String),
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

impl Cli {
    fn service_config(&self) -> Result<ServiceConfig, Error> {
        let mut c = ServiceConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data_dir {
            c.data_dir = d.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.preset {
            c.preset = p.clone();
            c.apparatus = None;
        }
        Ok(c)
    }

    fn store(c: &ServiceConfig) -> Result<DatasetStore, Error> {
        c.prepare_data_dir()?;
        Ok(DatasetStore::open(&c.data_dir)?)
    }

    pub fn execute(self) -> Result<Output, Error> {
        let c = self.service_config()?;
        let seed = self.seed;
        match self.command {
            Command::Serve { listen } => serve(c, listen).map(|_| Output::Json(json!({ "stopped": true }))),
            Command::Run { spec, out } => {
                let text = read(&spec)?;
                let mut raw: Value = serde_json::from_str(&text).map_err(|e| Error::Invalid(e.to_string()))?;
                if let Some(obj) = raw.as_object_mut() {
                    obj.entry("backend").or_insert(serde_json::to_value(c.default_backend).expect("backend serializes"));
                }
                let mut spec = ExperimentSpec::from_json(&raw.to_string())?;
                if let Some(seed) = seed {
                    spec.seed = seed;
                }
                run(&c, &spec, out.as_deref())
            }
            Command::Scan(a) => {
                let [x, y, z] = a.origin[..] else {
                    return Err(Error::Invalid(format!("--origin needs X,Y,Z, got {} values", a.origin.len())));
                };
                let spec = ExperimentSpec::new(
                    c.seed,
                    Experiment::ConfocalScan {
                        origin: [x, y, z],
                        width: a.width,
                        height: a.height,
                        step: a.step,
                        dwell: a.dwell,
                    },
                );
                run(&c, &spec, a.out.as_deref())
            }
            Command::Fit { model, dataset, range, csv } => {
                let d = load_dataset(&c, &dataset)?;
                let range = match range.as_deref() {
                    None => None,
                    Some(&[lo, hi]) => Some([lo, hi]),
                    Some(r) => return Err(Error::Invalid(format!("--range needs LO,HI, got {} values", r.len()))),
                };
                let result = fit_points(&d, model, range)?;
                if let Some(path) = csv {
                    let (x, y) = d.xy();
                    let mut text = String::from("x,y,y_fit,residual\n");
                    for [a, b, f, r] in result.curve(&x, &y) {
                        if range.is_none_or(|[lo, hi]| (lo..=hi).contains(&a)) {
                            text.push_str(&format!("{a:e},{b:e},{f:e},{r:e}\n"));
                        }
                    }
                    write(&path, &text)?;
                }
                Ok(Output::Json(json!({ "schema": crate::api::FIT_SCHEMA, "model": model, "dataset": d.id, "result": result })))
            }
            Command::Replay { log, dataset } => replay(&log, dataset.as_deref()),
            Command::CalibratePhotophysics { out } => {
                let mut config = c.apparatus_config()?;
                let report = calibrate(&config.rates, &CalibrationTargets::default())
                    .map_err(|e| Error::Experiment(e.to_string()))?;
                config.rates = report.rates;
                if let Some(path) = out {
                    write(&path, &config.to_toml())?;
                }
                Ok(Output::Json(serde_json::to_value(&report).expect("report serializes")))
            }
            Command::Pulse(p) => pulse(p),
            Command::Tags { duration, out } => {
                let app = Apparatus::new(c.apparatus_config()?, c.seed)?;
                let streams = app.session()?.acquire_tags(duration)?;
                let csv = tags_to_csv(&streams);
                match out {
                    Some(path) => {
                        write(&path, &csv)?;
                        let counts: Vec<usize> = streams.iter().map(|s| s.tags.len()).collect();
                        Ok(Output::Json(json!({ "file": path, "duration": duration, "counts": counts })))
                    }
                    None => Ok(Output::Text(csv)),
                }
            }
        }
    }
}

fn serve(c: ServiceConfig, listen: Option<String>) -> Result<(), Error> {
    let addr = match listen {
        Some(l) => ServiceConfig { listen: l, ..c.clone() }.listen_addr()?,
        None => c.listen_addr()?,
    };
    let store = Cli::store(&c)?;
    let lab = Lab::start(c.apparatus_config()?, c.seed, store)?;
    let app = router(AppState { lab, token: c.token.clone(), default_backend: c.default_backend });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("nvlab listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

fn run(c: &ServiceConfig, spec: &ExperimentSpec, out: Option<&Path>) -> Result<Output, Error> {
    let store = Cli::store(c)?;
    let app = Apparatus::new(c.apparatus_config()?, c.seed)?;
    let mut s = app.session()?;
    let d = run_experiment(&mut s, spec, &mut |_| {})?;
    let path = store.save(&d)?;
    store.save_log(&d.id, &s.log())?;
    if let Some(out) = out {
        write(out, &d.to_json())?;
    }
    Ok(Output::Json(json!({
        "dataset": d.id,
        "kind": d.kind,
        "points": d.signal.len(),
        "complete": d.complete,
        "file": path,
        "derived": d.derived,
        "warnings": d.warnings,
    })))
}

/// Accepts a path to a dataset file or an id in the data directory.
fn load_dataset(c: &ServiceConfig, what: &str) -> Result<Dataset, Error> {
    let p = Path::new(what);
    if p.is_file() {
        return Dataset::from_json(&read(p)?).map_err(Error::Invalid);
    }
    Ok(DatasetStore::open(&c.data_dir)?.load(what)?)
}

fn replay(log_path: &Path, dataset: Option<&Path>) -> Result<Output, Error> {
    let log: CommandLog = serde_json::from_str(&read(log_path)?).map_err(|e| Error::Invalid(e.to_string()))?;
    let outputs = replay_log(&log)?;
    let dataset_path = match dataset {
        Some(p) => p.to_path_buf(),
        None => {
            let name = log_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let id = name.strip_suffix(".commands.json").ok_or_else(|| {
                Error::Invalid(format!("cannot tell the dataset for {name}; pass --dataset"))
            })?;
            log_path.with_file_name(format!("{id}.json"))
        }
    };
    let text = read(&dataset_path)?;
    let d = Dataset::from_json(&text).map_err(Error::Invalid)?;
    if d.metadata.commands != log.entries.len() {
        return Err(Error::Replay(format!(
            "dataset records {} commands, log has {}",
            d.metadata.commands,
            log.entries.len()
        )));
    }
    let again = experiment::replay(&log.config, &d)?;
    if again.to_json() != text {
        return Err(Error::Replay("dataset file is not byte-identical to the rebuilt one".into()));
    }
    Ok(Output::Json(json!({ "replayed": true, "commands": outputs.len(), "dataset": d.id })))
}

fn pulse(p: PulseCommand) -> Result<Output, Error> {
    let load = |ir: &Path, cal: Option<&Path>| -> Result<(SequenceIR, DelayCalibration), Error> {
        let ir = SequenceIR::from_json(&read(ir)?).map_err(|e| Error::Invalid(e.to_string()))?;
        let cal = match cal {
            Some(c) => serde_json::from_str(&read(c)?).map_err(|e| Error::Invalid(e.to_string()))?,
            None => DelayCalibration::default(),
        };
        Ok((ir, cal))
    };
    match p {
        PulseCommand::Compile { ir, backend, calibration } => {
            let (ir, cal) = load(&ir, calibration.as_deref())?;
            let pattern = compile(&ir, &Backend::from(backend).profile(), &cal).map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(Output::Text(pattern.to_json()))
        }
        PulseCommand::Diagram { ir, backend, calibration, json } => {
            let (ir, cal) = load(&ir, calibration.as_deref())?;
            let d = timing_diagram(&ir, &Backend::from(backend).profile(), &cal).map_err(|e| Error::Invalid(e.to_string()))?;
            Ok(if json {
                Output::Json(serde_json::to_value(&d).expect("diagram serializes"))
            } else {
                Output::Text(d.render())
            })
        }
    }
}
