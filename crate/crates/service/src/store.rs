//! Episode state on disk: read-only base manifests, one append-only JSONL
//! edit log per episode and periodic snapshots.
//!
//! ```text
//! <root>/episodes/<id>.json      base manifest (+ frame sidecar)
//! <root>/edits/<id>.jsonl        log, one LogEntry per line
//! <root>/snapshots/<id>.json     state at some revision
//! <root>/frames/<frame_ref>      optional frame images
//! <root>/eval_ids.txt            optional held-out ids, one per line
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use demokit_core::episode::{load_episode, Episode, Manifest};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::edits::{replay, replay_from, AnnotationEdit, ApplyError, EpisodeState, LogAction, LogEntry, PendingEntry, PendingItem};

pub const SYSTEM_EDITOR: &str = "system:jobs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("episode {id}: {message}")]
    Corrupt { id: String, message: String },
    #[error("unknown episode {0:?}")]
    UnknownEpisode(String),
    #[error(transparent)]
    Apply(#[from] ApplyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub revision: u64,
    pub manifest: Manifest,
    pub pending: Vec<PendingEntry>,
    pub applied_jobs: BTreeSet<String>,
}

pub struct Store {
    root: PathBuf,
    snapshot_every: u64,
    episodes: BTreeMap<String, Arc<Mutex<EpisodeState>>>,
    eval_ids: BTreeSet<String>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                id: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

impl Store {
    pub fn open(root: &Path, snapshot_every: u64) -> Result<Store, StoreError> {
        let dir = root.join("episodes");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut episodes = BTreeMap::new();
        for p in paths {
            let base = load_episode(&p).map_err(|e| StoreError::Corrupt {
                id: p.display().to_string(),
                message: e.to_string(),
            })?;
            let id = base.episode_id.clone();
            let state = Self::restore(root, base)?;
            episodes.insert(id, Arc::new(Mutex::new(state)));
        }
        let ids_path = root.join("eval_ids.txt");
        let eval_ids = if ids_path.exists() {
            fs::read_to_string(&ids_path)
                .map_err(io_err(&ids_path))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        } else {
            BTreeSet::new()
        };
        Ok(Store {
            root: root.to_path_buf(),
            snapshot_every: snapshot_every.max(1),
            episodes,
            eval_ids,
        })
    }

    fn restore(root: &Path, base: Episode) -> Result<EpisodeState, StoreError> {
        let id = base.episode_id.clone();
        let log = read_log(&Self::log_path_in(root, &id))?;
        let corrupt = |message: String| StoreError::Corrupt { id: id.clone(), message };
        let snap_path = Self::snapshot_path_in(root, &id);
        if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(io_err(&snap_path))?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
            let episode = snap.manifest.into_episode(base.frames.clone()).map_err(|e| corrupt(e.to_string()))?;
            let state = EpisodeState {
                episode,
                revision: snap.revision,
                pending: snap.pending,
                applied_jobs: snap.applied_jobs,
            };
            return replay_from(state, &log).map_err(|e| corrupt(e.to_string()));
        }
        replay(base, &log).map_err(|e| corrupt(e.to_string()))
    }

    fn log_path_in(root: &Path, id: &str) -> PathBuf {
        root.join("edits").join(format!("{id}.jsonl"))
    }

    fn snapshot_path_in(root: &Path, id: &str) -> PathBuf {
        root.join("snapshots").join(format!("{id}.json"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        Self::log_path_in(&self.root, id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.episodes.keys().map(String::as_str)
    }

    pub fn is_eval(&self, id: &str) -> bool {
        self.eval_ids.contains(id)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<EpisodeState>>, StoreError> {
        self.episodes.get(id).cloned().ok_or_else(|| StoreError::UnknownEpisode(id.to_string()))
    }

    fn append(&self, id: &str, entry: &LogEntry) -> Result<(), StoreError> {
        let path = self.log_path(id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut line = serde_json::to_string(entry).expect("log entries serialize");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    fn maybe_snapshot(&self, state: &EpisodeState) -> Result<(), StoreError> {
        if state.revision % self.snapshot_every != 0 {
            return Ok(());
        }
        let path = Self::snapshot_path_in(&self.root, &state.episode.episode_id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let snap = Snapshot {
            revision: state.revision,
            manifest: Manifest::from_episode(&state.episode),
            pending: state.pending.clone(),
            applied_jobs: state.applied_jobs.clone(),
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Applies and persists `entry` (built by `build` on a copy of the
    /// state); the in-memory state changes only after the log write.
    async fn commit(
        &self,
        id: &str,
        build: impl FnOnce(&mut EpisodeState) -> Result<LogEntry, ApplyError>,
    ) -> Result<LogEntry, StoreError> {
        let cell = self.get(id)?;
        let mut state = cell.lock().await;
        let mut next = state.clone();
        let entry = build(&mut next)?;
        self.append(id, &entry)?;
        *state = next;
        if let Err(e) = self.maybe_snapshot(&state) {
            log::warn!("snapshot of {id} failed: {e}");
        }
        Ok(entry)
    }

    pub async fn edit(&self, id: &str, req: &AnnotationEdit) -> Result<LogEntry, StoreError> {
        self.commit(id, |s| s.apply_edit_request(req)).await
    }

    /// Records job output as pending review; a job already applied is a no-op.
    pub async fn apply_job_result(&self, id: &str, job_id: &str, items: Vec<PendingItem>) -> Result<Option<LogEntry>, StoreError> {
        {
            let cell = self.get(id)?;
            if cell.lock().await.applied_jobs.contains(job_id) {
                return Ok(None);
            }
        }
        let action = LogAction::JobResult {
            job_id: job_id.to_string(),
            items,
        };
        self.commit(id, |s| {
            s.apply(&action)?;
            Ok(LogEntry {
                revision: s.revision,
                editor_id: SYSTEM_EDITOR.to_string(),
                action,
            })
        })
        .await
        .map(Some)
    }

    /// Largest numeric suffix among applied job ids, for id allocation.
    pub async fn max_job_number(&self) -> u64 {
        let mut max = 0;
        for cell in self.episodes.values() {
            for j in &cell.lock().await.applied_jobs {
                if let Some(n) = j.rsplit('-').next().and_then(|n| n.parse::<u64>().ok()) {
                    max = max.max(n);
                }
            }
        }
        max
    }
}
