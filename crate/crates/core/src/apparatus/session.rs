use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::executor::{cw_emission_rate, gate_exposure, pattern_response, DriveSettings, GateSource};
use super::{
    detect, field_at_sample, ApparatusConfig, ApparatusError, ApparatusState, LaserSettings, MagnetState, MwSettings,
};
use crate::photophysics::{poisson_tags, CwEmitter, PhotonStream, REFERENCE_POWER_UW};
use crate::pulse::CompiledPattern;
use crate::rng::{derive_seed, label, rng_for, SimRng};

pub const COMMAND_LOG_SCHEMA: &str = "nvlab.commandlog/1";

/// Lowest collection weight worth simulating for gated runs and tag streams.
const FOCUS_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    MoveStage { xyz: [f64; 3] },
    SetMagnet { magnet: MagnetState },
    SetLaser { power_uw: f64, gate: GateSource },
    SetMw { frequency: f64, power_dbm: f64, gate: GateSource },
    ArmPattern { pattern: Box<CompiledPattern> },
    Run { repetitions: u64 },
    Count { dwell: f64 },
    AcquireTags { duration: f64 },
    Wait { seconds: f64 },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MoveStage { .. } => "move_stage",
            Command::SetMagnet { .. } => "set_magnet",
            Command::SetLaser { .. } => "set_laser",
            Command::SetMw { .. } => "set_mw",
            Command::ArmPattern { .. } => "arm_pattern",
            Command::Run { .. } => "run",
            Command::Count { .. } => "count",
            Command::AcquireTags { .. } => "acquire_tags",
            Command::Wait { .. } => "wait",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCounts {
    /// Detected counts per gate window, summed over repetitions.
    pub counts: Vec<u64>,
    /// Expected counts per gate window and repetition, before noise.
    pub expected: Vec<f64>,
    pub repetitions: u64,
    /// s.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandOutput {
    Ack,
    Stage { position: [f64; 3], clamped: bool },
    Field { field: [f64; 3] },
    Gates(GateCounts),
    Counts { counts: u64, dwell: f64 },
    Tags { channels: Vec<PhotonStream> },
}

impl CommandOutput {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        match self {
            CommandOutput::Tags { channels } => {
                h.update(b"tags");
                for c in channels {
                    h.update([c.channel]);
                    h.update((c.tags.len() as u64).to_le_bytes());
                    for t in &c.tags {
                        h.update(t.to_le_bytes());
                    }
                }
            }
            other => h.update(serde_json::to_vec(other).expect("output serializes")),
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub index: u64,
    /// Simulated time when the command was issued, s.
    pub clock: f64,
    pub command: Command,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandLog {
    pub schema: String,
    pub config: ApparatusConfig,
    pub seed: u64,
    pub start: ApparatusState,
    pub entries: Vec<LogEntry>,
}

struct Lab {
    config: ApparatusConfig,
    state: ApparatusState,
    armed: Option<CompiledPattern>,
    log: CommandLog,
}

struct Shared {
    busy: AtomicBool,
    cancel: AtomicBool,
    lab: Mutex<Lab>,
}

/// One simulated bench. Cheap to clone; clones share the instrument.
#[derive(Clone)]
pub struct Apparatus {
    shared: Arc<Shared>,
}

impl Apparatus {
    pub fn new(config: ApparatusConfig, seed: u64) -> Result<Self, ApparatusError> {
        config.validate()?;
        let settings = config.initial;
        let field = field_at_sample(&config.magnet, &settings.magnet).map_err(ApparatusError::Config)?;
        let state = ApparatusState {
            settings,
            field,
            drift_offset: [0.0; 3],
            clock: 0.0,
            seed,
            armed: None,
            stage_clamped: false,
        };
        let log = CommandLog {
            schema: COMMAND_LOG_SCHEMA.into(),
            config: config.clone(),
            seed,
            start: state.clone(),
            entries: Vec::new(),
        };
        let lab = Lab { config, state, armed: None, log };
        Ok(Self { shared: Arc::new(Shared { busy: AtomicBool::new(false), cancel: AtomicBool::new(false), lab: Mutex::new(lab) }) })
    }

    fn lab(&self) -> MutexGuard<'_, Lab> {
        self.shared.lab.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Takes the exclusive session, or fails if another client holds it.
    pub fn session(&self) -> Result<Session, ApparatusError> {
        self.shared
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| ApparatusError::SessionBusy)?;
        self.shared.cancel.store(false, Ordering::Release);
        Ok(Session { app: self.clone() })
    }

    pub fn is_busy(&self) -> bool {
        self.shared.busy.load(Ordering::Acquire)
    }

    /// Asks the session holder to stop at its next checkpoint.
    pub fn request_cancel(&self) {
        self.shared.cancel.store(true, Ordering::Release);
    }

    pub fn snapshot(&self) -> ApparatusState {
        self.lab().state.clone()
    }

    pub fn config(&self) -> ApparatusConfig {
        self.lab().config.clone()
    }

    pub fn command_log(&self) -> CommandLog {
        self.lab().log.clone()
    }
}

/// Exclusive handle on the apparatus. Released on drop.
pub struct Session {
    app: Apparatus,
}

impl Drop for Session {
    fn drop(&mut self) {
        self.app.shared.busy.store(false, Ordering::Release);
    }
}

impl Session {
    fn exec(&mut self, cmd: Command) -> Result<CommandOutput, ApparatusError> {
        self.app.lab().exec(cmd)
    }

    pub fn move_stage(&mut self, xyz: [f64; 3]) -> Result<([f64; 3], bool), ApparatusError> {
        match self.exec(Command::MoveStage { xyz })? {
            CommandOutput::Stage { position, clamped } => Ok((position, clamped)),
            _ => unreachable!(),
        }
    }

    pub fn set_magnet(&mut self, magnet: MagnetState) -> Result<[f64; 3], ApparatusError> {
        match self.exec(Command::SetMagnet { magnet })? {
            CommandOutput::Field { field } => Ok(field),
            _ => unreachable!(),
        }
    }

    pub fn set_laser(&mut self, power_uw: f64, gate: GateSource) -> Result<(), ApparatusError> {
        self.exec(Command::SetLaser { power_uw, gate }).map(|_| ())
    }

    pub fn set_mw(&mut self, frequency: f64, power_dbm: f64, gate: GateSource) -> Result<(), ApparatusError> {
        self.exec(Command::SetMw { frequency, power_dbm, gate }).map(|_| ())
    }

    pub fn arm_pattern(&mut self, pattern: CompiledPattern) -> Result<(), ApparatusError> {
        self.exec(Command::ArmPattern { pattern: Box::new(pattern) }).map(|_| ())
    }

    pub fn run(&mut self, repetitions: u64) -> Result<GateCounts, ApparatusError> {
        match self.exec(Command::Run { repetitions })? {
            CommandOutput::Gates(g) => Ok(g),
            _ => unreachable!(),
        }
    }

    pub fn count(&mut self, dwell: f64) -> Result<u64, ApparatusError> {
        match self.exec(Command::Count { dwell })? {
            CommandOutput::Counts { counts, .. } => Ok(counts),
            _ => unreachable!(),
        }
    }

    pub fn acquire_tags(&mut self, duration: f64) -> Result<Vec<PhotonStream>, ApparatusError> {
        match self.exec(Command::AcquireTags { duration })? {
            CommandOutput::Tags { channels } => Ok(channels),
            _ => unreachable!(),
        }
    }

    pub fn wait(&mut self, seconds: f64) -> Result<(), ApparatusError> {
        self.exec(Command::Wait { seconds }).map(|_| ())
    }

    pub fn snapshot(&self) -> ApparatusState {
        self.app.snapshot()
    }

    pub fn config(&self) -> ApparatusConfig {
        self.app.config()
    }

    pub fn cancel_requested(&self) -> bool {
        self.app.shared.cancel.load(Ordering::Acquire)
    }

    /// Starts a fresh command log from the current state under `seed`.
    /// Everything random after this depends only on the state, the seed and
    /// the commands issued.
    pub fn reset_log(&mut self, seed: u64) {
        let mut lab = self.app.lab();
        lab.armed = None;
        lab.state.armed = None;
        lab.state.seed = seed;
        lab.log = CommandLog {
            schema: COMMAND_LOG_SCHEMA.into(),
            config: lab.config.clone(),
            seed,
            start: lab.state.clone(),
            entries: Vec::new(),
        };
    }

    /// Puts the instrument back into a recorded state.
    pub fn restore(&mut self, state: &ApparatusState) -> Result<(), ApparatusError> {
        let mut lab = self.app.lab();
        let field = field_at_sample(&lab.config.magnet, &state.settings.magnet).map_err(ApparatusError::Config)?;
        lab.state = ApparatusState { field, armed: None, ..state.clone() };
        lab.armed = None;
        Ok(())
    }

    pub fn log(&self) -> CommandLog {
        self.app.command_log()
    }

    /// Expected count rate at the current stage position, Hz. Not logged and
    /// draws no random numbers.
    pub fn expected_rate(&self) -> f64 {
        self.app.lab().count_rate()
    }
}

impl Lab {
    fn exec(&mut self, cmd: Command) -> Result<CommandOutput, ApparatusError> {
        let index = self.log.entries.len() as u64;
        let clock = self.state.clock;
        let out = self.apply(&cmd, index)?;
        self.log.entries.push(LogEntry { index, clock, digest: out.digest(), command: cmd });
        Ok(out)
    }

    fn rng(&self, index: u64, name: &str) -> SimRng {
        rng_for(self.state.seed, &[label(name), index])
    }

    fn advance(&mut self, dt: f64, index: u64) {
        if dt <= 0.0 {
            return;
        }
        let sigma = self.config.drift.sigma_um_per_sqrt_min * (dt / 60.0).sqrt();
        if sigma > 0.0 {
            let mut rng = self.rng(index, "drift");
            for d in &mut self.state.drift_offset {
                let z: f64 = StandardNormal.sample(&mut rng);
                *d += sigma * z;
            }
        }
        self.state.clock += dt;
    }

    fn laser_power(&self) -> f64 {
        match self.state.settings.laser.gate {
            GateSource::Off => 0.0,
            _ => self.state.settings.laser.power_uw,
        }
    }

    fn rabi(&self) -> f64 {
        match self.state.settings.mw.gate {
            GateSource::Off => 0.0,
            _ => self.config.mw.rabi_for(self.state.settings.mw.power_dbm),
        }
    }

    /// `(NV index, collection weight)` for emitters near the focus.
    fn in_focus(&self, cutoff: f64) -> Vec<(usize, f64)> {
        let o = &self.config.optics;
        let reach = o.reach();
        let s = self.state.settings.stage;
        let drift = self.state.drift_offset;
        self.config
            .sample
            .nvs
            .iter()
            .enumerate()
            .filter_map(|(i, nv)| {
                let d = [0, 1, 2].map(|k| nv.position[k] + drift[k] - s[k]);
                if d.iter().any(|x| x.abs() > reach) {
                    return None;
                }
                let w = o.psf(d);
                (w > cutoff).then_some((i, w))
            })
            .collect()
    }

    fn background(&self, power: f64) -> f64 {
        self.config.sample.background_rate * power / REFERENCE_POWER_UW
    }

    fn dark(&self) -> f64 {
        let ch = if self.config.detector.splitter { 2 } else { self.config.detector.channels };
        self.config.detector.dark_rate * f64::from(ch)
    }

    fn count_rate(&self) -> f64 {
        let power = self.laser_power();
        let mut rate = self.dark();
        if power <= 0.0 {
            return rate;
        }
        let mw = self.state.settings.mw;
        let drive = (mw.gate != GateSource::Off).then(|| (mw.frequency, self.rabi()));
        for (i, w) in self.in_focus(1e-12) {
            let nv = &self.config.sample.nvs[i];
            let model = self.config.nv_model(nv, self.state.field, power, w);
            rate += cw_emission_rate(&model, drive);
        }
        rate + self.background(power)
    }

    fn apply(&mut self, cmd: &Command, index: u64) -> Result<CommandOutput, ApparatusError> {
        let invalid = |m: String| Err(ApparatusError::InvalidCommand(m));
        match *cmd {
            Command::MoveStage { xyz } => {
                if xyz.iter().any(|v| !v.is_finite()) {
                    return invalid(format!("stage target {xyz:?} is not finite"));
                }
                let r = self.config.stage_range;
                let position = xyz.map(|v| v.clamp(0.0, r));
                let clamped = position != xyz;
                self.state.settings.stage = position;
                self.state.stage_clamped = clamped;
                Ok(CommandOutput::Stage { position, clamped })
            }
            Command::SetMagnet { magnet } => {
                let c = &self.config.magnet;
                if !(c.d_min..=c.d_max).contains(&magnet.distance) || !magnet.theta.is_finite() || !magnet.phi.is_finite() {
                    return invalid(format!("magnet distance {} mm outside [{}, {}]", magnet.distance, c.d_min, c.d_max));
                }
                let field = field_at_sample(c, &magnet).map_err(ApparatusError::InvalidCommand)?;
                self.state.settings.magnet = magnet;
                self.state.field = field;
                Ok(CommandOutput::Field { field })
            }
            Command::SetLaser { power_uw, gate } => {
                if !(power_uw >= 0.0) || !power_uw.is_finite() {
                    return invalid(format!("laser power {power_uw} µW"));
                }
                self.state.settings.laser = LaserSettings { power_uw, gate };
                Ok(CommandOutput::Ack)
            }
            Command::SetMw { frequency, power_dbm, gate } => {
                let c = &self.config.mw;
                if !(frequency > 0.0) || !frequency.is_finite() {
                    return invalid(format!("MW frequency {frequency} Hz"));
                }
                if !(c.min_dbm..=c.max_dbm).contains(&power_dbm) {
                    return invalid(format!("MW power {power_dbm} dBm outside [{}, {}]", c.min_dbm, c.max_dbm));
                }
                self.state.settings.mw = MwSettings { frequency, power_dbm, gate };
                Ok(CommandOutput::Ack)
            }
            Command::ArmPattern { ref pattern } => {
                self.state.armed = Some(pattern.provenance.ir_hash.clone());
                self.armed = Some((**pattern).clone());
                Ok(CommandOutput::Ack)
            }
            Command::Run { repetitions } => self.run(repetitions, index).map(CommandOutput::Gates),
            Command::Count { dwell } => {
                if !(dwell > 0.0) || !dwell.is_finite() {
                    return invalid(format!("dwell {dwell} s"));
                }
                let mean = self.count_rate() * dwell;
                let counts = poisson(mean, &mut self.rng(index, "count"));
                self.advance(dwell, index);
                Ok(CommandOutput::Counts { counts, dwell })
            }
            Command::AcquireTags { duration } => {
                if !(duration > 0.0) || !duration.is_finite() {
                    return invalid(format!("duration {duration} s"));
                }
                let channels = self.tags(duration, index);
                self.advance(duration, index);
                Ok(CommandOutput::Tags { channels })
            }
            Command::Wait { seconds } => {
                if !(seconds >= 0.0) || !seconds.is_finite() {
                    return invalid(format!("wait {seconds} s"));
                }
                self.advance(seconds, index);
                Ok(CommandOutput::Ack)
            }
        }
    }

    fn run(&mut self, repetitions: u64, index: u64) -> Result<GateCounts, ApparatusError> {
        let pattern = self.armed.as_ref().ok_or(ApparatusError::NoPatternArmed)?;
        if repetitions == 0 {
            return Err(ApparatusError::InvalidCommand("zero repetitions".into()));
        }
        let s = self.state.settings;
        let drive = DriveSettings {
            laser: s.laser.gate,
            mw: s.mw.gate,
            mw_frequency: pattern.mw_frequency.unwrap_or(s.mw.frequency),
            rabi: self.rabi(),
        };
        let power = if s.laser.gate == GateSource::Off { 0.0 } else { s.laser.power_uw };
        let mut expected = vec![0.0; pattern.gates.len()];
        if power > 0.0 {
            for (i, w) in self.in_focus(FOCUS_CUTOFF) {
                let model = self.config.nv_model(&self.config.sample.nvs[i], self.state.field, power, w);
                let r = pattern_response(&model, pattern, &drive, &self.config.latency)?;
                for (e, p) in expected.iter_mut().zip(&r.gate_photons) {
                    *e += p;
                }
            }
        }
        let (bg, dark) = (self.background(power), self.dark());
        for (e, (open, lit)) in expected.iter_mut().zip(gate_exposure(pattern, &drive, &self.config.latency)) {
            *e += bg * lit + dark * open;
        }
        let mut rng = self.rng(index, "gates");
        let counts = expected.iter().map(|e| poisson(e * repetitions as f64, &mut rng)).collect();
        let period = pattern.period();
        self.advance(period * repetitions as f64, index);
        Ok(GateCounts { counts, expected, repetitions, period })
    }

    fn tags(&self, duration: f64, index: u64) -> Vec<PhotonStream> {
        let seed = self.state.seed;
        let power = self.laser_power();
        let mut all = Vec::new();
        if power > 0.0 {
            for (i, w) in self.in_focus(FOCUS_CUTOFF) {
                let nv = &self.config.sample.nvs[i];
                let model = self.config.nv_model(nv, self.state.field, power, w);
                let mut rng = rng_for(seed, &[label("emitter"), index, u64::from(nv.id)]);
                all.extend(CwEmitter::new(&model.rates).sample(duration, &mut rng));
            }
            let mut rng = self.rng(index, "background");
            all.extend(poisson_tags(self.background(power), duration, &mut rng));
        }
        all.sort_unstable();
        let stream = PhotonStream { tags: all, channel: 0, seed };
        detect(&stream, &self.config.detector, duration, derive_seed(seed, &[label("detect"), index]))
    }
}

fn poisson(mean: f64, rng: &mut SimRng) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(p) => p.sample(rng) as u64,
        // Beyond the sampler's range the normal limit is exact to float precision.
        Err(_) => (mean + mean.sqrt() * rng.sample::<f64, _>(StandardNormal)).round().max(0.0) as u64,
    }
}

/// Re-issues every command of `log` on a fresh apparatus and checks that
/// each output digest matches.
pub fn replay_log(log: &CommandLog) -> Result<Vec<CommandOutput>, ApparatusError> {
    if log.schema != COMMAND_LOG_SCHEMA {
        return Err(ApparatusError::Replay(format!("unknown log schema {:?}", log.schema)));
    }
    let app = Apparatus::new(log.config.clone(), log.seed)?;
    let mut s = app.session()?;
    s.restore(&log.start)?;
    s.reset_log(log.seed);
    let mut outputs = Vec::with_capacity(log.entries.len());
    for e in &log.entries {
        let clock = s.snapshot().clock;
        if clock.to_bits() != e.clock.to_bits() {
            return Err(ApparatusError::Replay(format!("command {} issued at {clock} s, log says {} s", e.index, e.clock)));
        }
        let out = s.exec(e.command.clone())?;
        let digest = out.digest();
        if digest != e.digest {
            return Err(ApparatusError::Replay(format!("command {} ({}) output differs", e.index, e.command.name())));
        }
        outputs.push(out);
    }
    Ok(outputs)
}
