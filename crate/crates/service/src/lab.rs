//! The single apparatus, its job queue and the worker that drains it.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use nvlab_core::apparatus::{Apparatus, ApparatusConfig, ApparatusState, LaserSettings, MagnetState, MwSettings};
use nvlab_core::experiment::{run_experiment, Dataset, DatasetStore, ExperimentSpec, Progress};

use crate::error::Error;

pub const API_SCHEMA: &str = "nvlab.api/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Cancelled,
    Failed,
}

impl JobState {
    fn rank(self) -> u8 {
        match self {
            JobState::Queued => 0,
            JobState::Running => 1,
            _ => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JobRecord {
    pub schema: &'static str,
    pub id: String,
    pub spec: ExperimentSpec,
    pub state: JobState,
    /// Fraction of points measured, 0..1.
    pub progress: f64,
    pub dataset: Option<String>,
    pub error: Option<String>,
    #[serde(skip)]
    events: Vec<String>,
    #[serde(skip)]
    points: usize,
    #[serde(skip)]
    measured: usize,
    #[serde(skip)]
    cancel_requested: bool,
}

impl JobRecord {
    fn advance(&mut self, next: JobState) {
        assert!(
            next.rank() > self.state.rank() || (next == self.state && !next.is_terminal()),
            "job {} cannot go from {:?} to {next:?}",
            self.id,
            self.state
        );
        self.state = next;
    }

    fn push_event(&mut self, kind: &str, payload: Value) {
        let line = json!({ "type": kind, "job_id": self.id, "payload": payload });
        self.events.push(line.to_string());
    }
}

/// Direct settings for `PUT /apparatus`. Absent fields are left alone.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusUpdate {
    pub stage: Option<[f64; 3]>,
    pub magnet: Option<MagnetState>,
    pub laser: Option<LaserSettings>,
    pub mw: Option<MwSettings>,
}

#[derive(Default)]
struct Jobs {
    records: BTreeMap<u64, JobRecord>,
    next: u64,
}

pub struct Lab {
    apparatus: Apparatus,
    store: DatasetStore,
    jobs: Mutex<Jobs>,
    queue: Mutex<mpsc::Sender<u64>>,
    changed: watch::Sender<u64>,
}

fn job_key(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl Lab {
    /// Starts the worker thread. It exits once the last handle is dropped.
    pub fn start(config: ApparatusConfig, seed: u64, store: DatasetStore) -> Result<Arc<Lab>, Error> {
        let apparatus = Apparatus::new(config, seed)?;
        let (tx, rx) = mpsc::channel();
        let lab = Arc::new(Lab {
            apparatus,
            store,
            jobs: Mutex::new(Jobs::default()),
            queue: Mutex::new(tx),
            changed: watch::channel(0).0,
        });
        let weak = Arc::downgrade(&lab);
        thread::Builder::new()
            .name("nvlab-worker".into())
            .spawn(move || {
                while let Ok(key) = rx.recv() {
                    let Some(lab) = weak.upgrade() else { break };
                    lab.execute(key);
                }
            })
            .map_err(Error::from)?;
        Ok(lab)
    }

    fn jobs(&self) -> MutexGuard<'_, Jobs> {
        self.jobs.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn notify(&self) {
        self.changed.send_modify(|v| *v += 1);
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.changed.subscribe()
    }

    pub fn store(&self) -> &DatasetStore {
        &self.store
    }

    pub fn config(&self) -> ApparatusConfig {
        self.apparatus.config()
    }

    pub fn snapshot(&self) -> ApparatusState {
        self.apparatus.snapshot()
    }

    pub fn status(&self) -> Value {
        let jobs = self.jobs();
        let running = jobs.records.values().find(|j| j.state == JobState::Running).map(|j| j.id.clone());
        let queued = jobs.records.values().filter(|j| j.state == JobState::Queued).count();
        json!({
            "schema": API_SCHEMA,
            "service": "nvlab",
            "version": env!("CARGO_PKG_VERSION"),
            "busy": self.apparatus.is_busy(),
            "running_job": running,
            "queued_jobs": queued,
            "jobs": jobs.records.len(),
            "apparatus": self.apparatus.snapshot(),
        })
    }

    pub fn submit(&self, spec: ExperimentSpec) -> Result<JobRecord, Error> {
        let mut jobs = self.jobs();
        jobs.next += 1;
        let key = jobs.next;
        let mut rec = JobRecord {
            schema: API_SCHEMA,
            id: format!("job-{key}"),
            spec,
            state: JobState::Queued,
            progress: 0.0,
            dataset: None,
            error: None,
            events: Vec::new(),
            points: 0,
            measured: 0,
            cancel_requested: false,
        };
        rec.push_event("queued", json!({}));
        jobs.records.insert(key, rec.clone());
        drop(jobs);
        self.queue
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .send(key)
            .map_err(|_| Error::Io("job worker has stopped".into()))?;
        self.notify();
        Ok(rec)
    }

    pub fn job(&self, id: &str) -> Result<JobRecord, Error> {
        job_key(id)
            .and_then(|k| self.jobs().records.get(&k).cloned())
            .ok_or_else(|| Error::NotFound(format!("job {id}")))
    }

    pub fn latest_job(&self) -> Option<String> {
        self.jobs().records.values().next_back().map(|j| j.id.clone())
    }

    /// Events from index `from` on, and whether the job has finished.
    pub fn events(&self, id: &str, from: usize) -> Result<(Vec<String>, bool), Error> {
        let jobs = self.jobs();
        let rec = job_key(id).and_then(|k| jobs.records.get(&k)).ok_or_else(|| Error::NotFound(format!("job {id}")))?;
        let tail = rec.events.get(from..).unwrap_or_default().to_vec();
        Ok((tail, rec.state.is_terminal()))
    }

    /// Queued jobs are dropped at once; a running job stops at its next
    /// point and keeps what it measured.
    pub fn cancel(&self, id: &str) -> Result<JobRecord, Error> {
        let mut jobs = self.jobs();
        let rec = job_key(id)
            .and_then(|k| jobs.records.get_mut(&k))
            .ok_or_else(|| Error::NotFound(format!("job {id}")))?;
        match rec.state {
            JobState::Queued => {
                rec.advance(JobState::Cancelled);
                rec.push_event("cancelled", json!({ "dataset": null }));
            }
            JobState::Running => {
                rec.cancel_requested = true;
                self.apparatus.request_cancel();
            }
            _ => {}
        }
        let out = rec.clone();
        drop(jobs);
        self.notify();
        Ok(out)
    }

    /// Applies direct settings. Refused while a job holds the apparatus.
    pub fn update(&self, u: &ApparatusUpdate) -> Result<ApparatusState, Error> {
        let mut s = self.apparatus.session()?;
        if let Some(m) = u.magnet {
            s.set_magnet(m)?;
        }
        if let Some(l) = u.laser {
            s.set_laser(l.power_uw, l.gate)?;
        }
        if let Some(m) = u.mw {
            s.set_mw(m.frequency, m.power_dbm, m.gate)?;
        }
        if let Some(p) = u.stage {
            s.move_stage(p)?;
        }
        Ok(s.snapshot())
    }

    fn with_job(&self, key: u64, f: impl FnOnce(&mut JobRecord)) {
        if let Some(rec) = self.jobs().records.get_mut(&key) {
            f(rec);
        }
        self.notify();
    }

    fn execute(&self, key: u64) {
        let spec = {
            let mut jobs = self.jobs();
            let Some(rec) = jobs.records.get_mut(&key) else { return };
            if rec.state != JobState::Queued {
                return;
            }
            rec.advance(JobState::Running);
            rec.push_event("running", json!({}));
            rec.spec.clone()
        };
        self.notify();
        // A direct command may hold the session for a moment.
        let mut session = loop {
            match self.apparatus.session() {
                Ok(s) => break s,
                Err(_) => thread::sleep(Duration::from_millis(2)),
            }
        };
        // Taking the session clears the flag, so re-raise an early cancel.
        if self.jobs().records.get(&key).is_some_and(|r| r.cancel_requested) {
            self.apparatus.request_cancel();
        }
        let result = run_experiment(&mut session, &spec, &mut |p| self.with_job(key, |rec| record_progress(rec, p)));
        let log = session.log();
        drop(session);
        let outcome = result.map_err(Error::from).and_then(|d| {
            self.store.save(&d)?;
            self.store.save_log(&d.id, &log)?;
            Ok(d)
        });
        self.with_job(key, |rec| finish(rec, outcome));
    }
}

fn record_progress(rec: &mut JobRecord, p: &Progress) {
    let mut payload = serde_json::to_value(p).expect("progress serializes");
    let kind = payload.as_object_mut().and_then(|o| o.remove("type")).and_then(|v| v.as_str().map(String::from));
    match p {
        Progress::Started { points, .. } => rec.points = *points,
        Progress::Point { .. } | Progress::Pixel { .. } => rec.measured += 1,
        Progress::Acquired { elapsed, total } => rec.progress = rec.progress.max((elapsed / total).min(1.0)),
        Progress::Note { .. } => {}
    }
    if rec.points > 0 && rec.measured > 0 {
        rec.progress = rec.progress.max((rec.measured as f64 / rec.points as f64).min(1.0));
    }
    rec.push_event(kind.as_deref().unwrap_or("progress"), payload);
}

fn finish(rec: &mut JobRecord, outcome: Result<Dataset, Error>) {
    match outcome {
        Ok(d) if d.complete => {
            rec.progress = 1.0;
            rec.dataset = Some(d.id.clone());
            rec.advance(JobState::Done);
            rec.push_event("done", json!({ "dataset": d.id, "points": d.signal.len() }));
        }
        Ok(d) => {
            rec.dataset = Some(d.id.clone());
            rec.advance(JobState::Cancelled);
            rec.push_event("cancelled", json!({ "dataset": d.id, "points": d.signal.len() }));
        }
        Err(e) => {
            rec.error = Some(e.to_string());
            rec.advance(JobState::Failed);
            rec.push_event("failed", e.to_json()["error"].clone());
        }
    }
}
