//! Live sessions and their on-disk form.
//!
//! A persisted session is its record (dataset path and configuration) plus
//! an append-only event log. Accumulators are never written; they are rebuilt
//! by replaying the log.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use parking_lot::{Mutex, MutexGuard, RwLock};
use serde::{Deserialize, Serialize};
use softspread::dataset::{load_dataset, save_dataset, DatasetFormat, EmbeddedDataset};
use softspread::graph::{GraphKind, Normalization};
use softspread::solver::SolverConfig;
use softspread::session::{session_for_dataset, AnnotationEvent, AnnotationSource, SessionConfig, SpreadSession};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ApiResult};

/// Everything needed to rebuild a session's graph and empty state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub graph: GraphKind,
    pub normalization: Normalization,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    dataset: PathBuf,
    spec: SessionSpec,
    created_ms: u64,
}

/// One line of the persisted event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoggedEvent {
    sequence: u64,
    point_id: String,
    class: usize,
    source: AnnotationSource,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub struct SessionEntry {
    pub id: String,
    pub dataset: Arc<EmbeddedDataset>,
    pub spec: SessionSpec,
    pub created_ms: u64,
    updated_ms: AtomicU64,
    index: HashMap<String, usize>,
    writer: Mutex<()>,
    state: RwLock<SpreadSession>,
    log_path: Option<PathBuf>,
}

/// Outcome of one applied annotation.
pub struct Applied {
    pub event: AnnotationEvent,
    pub estimate: Vec<f64>,
    pub received_mass: f64,
    pub changed_points: usize,
}

/// Received-mass change that counts a point as touched by an annotation.
pub const CHANGE_THRESHOLD: f64 = 1e-6;

impl SessionEntry {
    fn build(id: String, dataset: Arc<EmbeddedDataset>, spec: SessionSpec, created_ms: u64) -> ApiResult<Self> {
        let session = session_for_dataset(dataset.clone(), spec.graph, spec.normalization, spec.config)?;
        let index = dataset.ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            id,
            dataset,
            spec,
            created_ms,
            updated_ms: AtomicU64::new(created_ms),
            index,
            writer: Mutex::new(()),
            state: RwLock::new(session),
            log_path: None,
        })
    }

    pub fn updated_ms(&self) -> u64 {
        self.updated_ms.load(Ordering::Relaxed)
    }

    pub fn point_index(&self, point_id: &str) -> Option<usize> {
        self.index.get(point_id).copied()
    }

    /// Read access to the current state.
    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, SpreadSession> {
        self.state.read()
    }

    /// The single writer slot; `None` while another annotation is in flight.
    pub fn try_writer(&self) -> Option<MutexGuard<'_, ()>> {
        self.writer.try_lock()
    }

    /// Solves, logs and applies one annotation. The caller holds the writer slot.
    pub fn apply(&self, _writer: &MutexGuard<'_, ()>, point: usize, class: usize) -> ApiResult<Applied> {
        let mut state = self.state.write();
        if class >= state.classes() {
            return Err(ApiError::bad_request(format!(
                "class {class} out of range for {} classes",
                state.classes()
            )));
        }
        let before = state.received().to_vec();
        // solve first so that nothing is logged for an annotation that cannot be applied
        state.propagation(point)?;
        let event = AnnotationEvent {
            point,
            class,
            sequence: state.log().len() as u64,
            source: AnnotationSource::Human,
        };
        if let Some(path) = &self.log_path {
            append_event(path, &self.dataset, &event)
                .map_err(|e| ApiError::internal(format!("cannot persist annotation: {e}")))?;
        }
        state.apply_event(&event)?;
        self.updated_ms.store(now_ms(), Ordering::Relaxed);
        let changed_points = state
            .received()
            .iter()
            .zip(&before)
            .filter(|(a, b)| (*a - *b).abs() > CHANGE_THRESHOLD)
            .count();
        Ok(Applied {
            event,
            estimate: state.estimate_at(point),
            received_mass: state.received()[point],
            changed_points,
        })
    }
}

fn append_event(path: &Path, dataset: &EmbeddedDataset, event: &AnnotationEvent) -> std::io::Result<()> {
    let line = serde_json::to_string(&LoggedEvent {
        sequence: event.sequence,
        point_id: dataset.ids()[event.point].clone(),
        class: event.class,
        source: event.source,
    })?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    f.sync_data()
}

/// Parameters of a new session; `classes` falls back to the dataset's label columns.
#[derive(Debug, Clone, Copy)]
pub struct SessionRequest {
    pub graph: GraphKind,
    pub normalization: Normalization,
    pub solver: SolverConfig,
    pub classes: Option<usize>,
    pub lipschitz: Option<f64>,
}

/// Where a new session's points come from.
pub enum NewDataset {
    /// Relative to the configured dataset root.
    Path(PathBuf),
    Inline(EmbeddedDataset),
}

pub struct SessionStore {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
}

impl SessionStore {
    /// Opens the store, replaying every session persisted under the data directory.
    pub fn open(config: ServiceConfig) -> Result<Self, String> {
        let store = Self {
            config,
            sessions: RwLock::new(HashMap::new()),
        };
        if let Some(dir) = &store.config.data_dir {
            fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
            let mut records: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| format!("cannot list {}: {e}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".session.json"))
                .collect();
            records.sort();
            for path in records {
                let entry = store.restore(dir, &path).map_err(|e| format!("{}: {e}", path.display()))?;
                store.sessions.write().insert(entry.id.clone(), Arc::new(entry));
            }
        }
        Ok(store)
    }

    fn restore(&self, dir: &Path, record_path: &Path) -> Result<SessionEntry, String> {
        let record: SessionRecord =
            serde_json::from_str(&fs::read_to_string(record_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let dataset =
            Arc::new(load_dataset(&record.dataset, DatasetFormat::from_path(&record.dataset)).map_err(|e| e.to_string())?);
        let mut entry = SessionEntry::build(record.id.clone(), dataset, record.spec, record.created_ms)
            .map_err(|e| e.message)?;
        let log_path = dir.join(format!("{}.events.jsonl", record.id));
        if log_path.exists() {
            let mut events = Vec::new();
            for (row, line) in BufReader::new(File::open(&log_path).map_err(|e| e.to_string())?).lines().enumerate() {
                let line = line.map_err(|e| e.to_string())?;
                if line.trim().is_empty() {
                    continue;
                }
                let logged: LoggedEvent = serde_json::from_str(&line).map_err(|e| format!("event log row {row}: {e}"))?;
                let point = entry
                    .point_index(&logged.point_id)
                    .ok_or_else(|| format!("event log row {row}: unknown point '{}'", logged.point_id))?;
                events.push(AnnotationEvent {
                    point,
                    class: logged.class,
                    sequence: logged.sequence,
                    source: logged.source,
                });
            }
            let state = entry.state.get_mut();
            state.prefetch(events.iter().map(|e| e.point)).map_err(|e| e.to_string())?;
            for event in &events {
                state.apply_event(event).map_err(|e| e.to_string())?;
            }
            let modified = fs::metadata(&log_path).and_then(|m| m.modified()).ok();
            if let Some(ms) = modified.and_then(|t| t.duration_since(UNIX_EPOCH).ok()) {
                entry.updated_ms = AtomicU64::new(ms.as_millis() as u64);
            }
        }
        entry.log_path = Some(log_path);
        Ok(entry)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn get(&self, id: &str) -> ApiResult<Arc<SessionEntry>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn resolve_path(&self, relative: &Path) -> ApiResult<PathBuf> {
        let root = self
            .config
            .dataset_root
            .as_ref()
            .ok_or_else(|| ApiError::bad_request("dataset paths are disabled; upload the dataset inline"))?;
        if relative.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(ApiError::bad_request(format!(
                "dataset path '{}' must be relative to the dataset root without '..'",
                relative.display()
            )));
        }
        Ok(root.join(relative))
    }

    fn over_capacity(message: String) -> ApiError {
        ApiError::new(StatusCode::INSUFFICIENT_STORAGE, message)
    }

    /// Builds the graph and registers an empty session.
    pub fn create(&self, dataset: NewDataset, request: SessionRequest) -> ApiResult<Arc<SessionEntry>> {
        if self.len() >= self.config.max_sessions {
            return Err(Self::over_capacity(format!("session limit {} reached", self.config.max_sessions)));
        }
        let (dataset, source_path) = match dataset {
            NewDataset::Path(rel) => {
                let path = self.resolve_path(&rel)?;
                let ds = load_dataset(&path, DatasetFormat::from_path(&path))
                    .map_err(|e| ApiError::bad_request(e.to_string()))?;
                (ds, Some(path))
            }
            NewDataset::Inline(ds) => (ds, None),
        };
        if dataset.len() > self.config.max_points {
            return Err(Self::over_capacity(format!(
                "dataset has {} points, the limit is {}",
                dataset.len(),
                self.config.max_points
            )));
        }
        let classes = request.classes.or(dataset.classes()).ok_or_else(|| {
            ApiError::bad_request("'classes' is required when the dataset has no label columns")
        })?;
        let spec = SessionSpec {
            graph: request.graph,
            normalization: request.normalization,
            config: SessionConfig {
                solver: request.solver,
                classes,
                lipschitz: request.lipschitz,
            },
        };
        if let GraphKind::Knn { k } = spec.graph {
            if k >= dataset.len() {
                return Err(ApiError::bad_request(format!(
                    "k = {k} needs more than {k} points, the dataset has {}",
                    dataset.len()
                )));
            }
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let created_ms = now_ms();
        let dataset = Arc::new(dataset);
        let mut entry = SessionEntry::build(id.clone(), dataset.clone(), spec, created_ms)?;
        if let Some(dir) = &self.config.data_dir {
            let dataset_path = match source_path {
                Some(p) => p,
                None => {
                    let p = dir.join(format!("{id}.dataset.csv"));
                    save_dataset(&dataset, &p, DatasetFormat::DelimitedText)
                        .map_err(|e| ApiError::internal(format!("cannot persist dataset: {e}")))?;
                    p
                }
            };
            let record = SessionRecord {
                id: id.clone(),
                dataset: dataset_path,
                spec: entry.spec.clone(),
                created_ms,
            };
            let text = serde_json::to_string_pretty(&record).map_err(|e| ApiError::internal(e.to_string()))?;
            fs::write(dir.join(format!("{id}.session.json")), text)
                .map_err(|e| ApiError::internal(format!("cannot persist session: {e}")))?;
            entry.log_path = Some(dir.join(format!("{id}.events.jsonl")));
        }
        let entry = Arc::new(entry);
        let mut sessions = self.sessions.write();
        // re-checked under the lock; the graph build above ran unlocked
        if sessions.len() >= self.config.max_sessions {
            if let Some(dir) = &self.config.data_dir {
                for suffix in ["session.json", "dataset.csv"] {
                    let _ = fs::remove_file(dir.join(format!("{id}.{suffix}")));
                }
            }
            return Err(Self::over_capacity(format!("session limit {} reached", self.config.max_sessions)));
        }
        sessions.insert(id, entry.clone());
        Ok(entry)
    }
}
