//! Single-writer event log with snapshots. Readers load the current
//! state without locking; writers are serialized.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{Event, ModelError, Study};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 50;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct State {
    /// Number of events applied.
    pub seq: u64,
    pub studies: BTreeMap<String, Study>,
}

impl State {
    fn apply(&mut self, event: &Event) {
        self.seq += 1;
        match event {
            Event::StudyCreated { study } => {
                self.studies.insert(study.study_id.clone(), (**study).clone());
            }
            Event::Started { study_id, .. } | Event::Submitted { study_id, .. } | Event::ArbitrationOpened { study_id, .. } => {
                if let Some(s) = self.studies.get_mut(study_id) {
                    s.apply(event);
                }
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

struct Writer {
    log: Option<File>,
    since_snapshot: u64,
}

pub struct Store {
    state: ArcSwap<State>,
    writer: Mutex<Writer>,
    dir: Option<PathBuf>,
    snapshot_every: u64,
    clock: Clock,
}

impl Store {
    /// A store that keeps nothing on disk.
    pub fn in_memory(clock: Clock) -> Self {
        Store {
            state: ArcSwap::from_pointee(State::default()),
            writer: Mutex::new(Writer { log: None, since_snapshot: 0 }),
            dir: None,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            clock,
        }
    }

    /// Opens or creates a store in `dir`, loading the latest snapshot and
    /// replaying the events logged after it.
    pub fn open(dir: &Path, snapshot_every: u64, clock: Clock) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state: State = match fs::read_to_string(&snap_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| StoreError::Corrupt { path: snap_path.clone(), line: e.line(), message: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => State::default(),
            Err(e) => return Err(io(&snap_path)(e)),
        };
        let log_path = dir.join(EVENTS_FILE);
        let mut since = 0;
        if log_path.exists() {
            let f = File::open(&log_path).map_err(io(&log_path))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(io(&log_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: LogLine = serde_json::from_str(&line)
                    .map_err(|e| StoreError::Corrupt { path: log_path.clone(), line: i + 1, message: e.to_string() })?;
                if l.seq > state.seq {
                    state.apply(&l.event);
                    since += 1;
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io(&log_path))?;
        Ok(Store {
            state: ArcSwap::from_pointee(state),
            writer: Mutex::new(Writer { log: Some(log), since_snapshot: since }),
            dir: Some(dir.to_path_buf()),
            snapshot_every: snapshot_every.max(1),
            clock,
        })
    }

    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    pub fn snapshot(&self) -> Arc<State> {
        self.state.load_full()
    }

    /// Runs `decide` against the current state under the writer lock,
    /// logs the events it returns and publishes the new state.
    pub fn write<T>(&self, decide: impl FnOnce(&State, DateTime<Utc>) -> Result<(Vec<Event>, T), ModelError>) -> Result<T, StoreError> {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.state.load_full();
        let (events, out) = decide(&current, self.now())?;
        if events.is_empty() {
            return Ok(out);
        }
        let mut next = (*current).clone();
        let mut lines = String::new();
        for e in &events {
            next.apply(e);
            let line = serde_json::to_string(&LogLine { seq: next.seq, event: e.clone() }).expect("events serialize");
            lines.push_str(&line);
            lines.push('\n');
        }
        if let (Some(log), Some(dir)) = (w.log.as_mut(), &self.dir) {
            let path = dir.join(EVENTS_FILE);
            log.write_all(lines.as_bytes()).map_err(io(&path))?;
            log.sync_data().map_err(io(&path))?;
        }
        w.since_snapshot += events.len() as u64;
        let next = Arc::new(next);
        self.state.store(next.clone());
        if w.since_snapshot >= self.snapshot_every {
            if let Some(dir) = &self.dir {
                write_snapshot(dir, &next)?;
                w.since_snapshot = 0;
            }
        }
        Ok(out)
    }
}

fn write_snapshot(dir: &Path, state: &State) -> Result<(), StoreError> {
    let path = dir.join(SNAPSHOT_FILE);
    let tmp = dir.join("snapshot.json.tmp");
    let mut f = File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(&serde_json::to_vec(state).expect("state serializes")).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))
}
