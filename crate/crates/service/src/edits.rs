//! Annotation edits, the append-only log format and deterministic replay.
//!
//! Every state change of an episode, human edit or job result, is one log
//! entry carrying the revision it produced. Replaying the entries over the
//! base manifest reproduces the current state exactly.

use std::collections::BTreeSet;

use demokit_core::episode::{Clip, ContactAnnotation, Episode, Manifest, MaskEntry, RleMask};
use demokit_core::skills::PrimitiveSkill;
use serde::{Deserialize, Serialize};

/// Consecutive rejects after which an object is flagged as a hard sample.
pub const HARD_SAMPLE_REJECTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", deny_unknown_fields)]
pub enum EditKind {
    SetContactFrame {
        frame: usize,
        /// Defaults to the object of the first contact annotation.
        #[serde(default)]
        object_id: Option<String>,
    },
    AddClip {
        start_frame: usize,
        end_frame: usize,
        skill: PrimitiveSkill,
        /// Defaults to the skill template filled with the bound object.
        #[serde(default)]
        description: Option<String>,
        #[serde(default)]
        object_id: Option<String>,
    },
    EditClipText {
        index: usize,
        description: String,
    },
    DeleteClip {
        index: usize,
    },
    AcceptMask {
        object_id: String,
        frame: usize,
    },
    RejectMask {
        object_id: String,
        frame: usize,
    },
    SetGlobalDescription {
        text: String,
    },
    BindObjectToClip {
        index: usize,
        object_id: String,
    },
}

/// Body of `POST /episodes/{id}/edits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEdit {
    #[serde(default)]
    pub episode_id: Option<String>,
    #[serde(flatten)]
    pub edit: EditKind,
    pub editor_id: String,
    /// Revision the edit was made against.
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub skill: PrimitiveSkill,
    pub text: String,
}

/// Job output awaiting human review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PendingItem {
    Mask { object_id: String, frame: usize, rle: RleMask },
    Plan { steps: Vec<PlanStep> },
    Onset { frame: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEntry {
    pub job_id: String,
    pub item: PendingItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum LogAction {
    Edit {
        #[serde(flatten)]
        edit: EditKind,
    },
    JobResult {
        job_id: String,
        items: Vec<PendingItem>,
    },
}

/// One line of an episode's edit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub revision: u64,
    pub editor_id: String,
    #[serde(flatten)]
    pub action: LogAction,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApplyError {
    #[error("revision {given} is stale; current revision is {current}")]
    Conflict { given: u64, current: u64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub episode: Episode,
    pub revision: u64,
    pub pending: Vec<PendingEntry>,
    /// Jobs whose results were already applied; re-delivery is a no-op.
    pub applied_jobs: BTreeSet<String>,
}

fn invalid(msg: impl Into<String>) -> ApplyError {
    ApplyError::Invalid(msg.into())
}

fn clip_mut(e: &mut Episode, index: usize) -> Result<&mut Clip, ApplyError> {
    let n = e.annotations.clips.len();
    e.annotations.clips.get_mut(index).ok_or_else(|| invalid(format!("clip {index} does not exist ({n} clips)")))
}

impl EpisodeState {
    pub fn new(episode: Episode) -> Self {
        EpisodeState {
            episode,
            revision: 0,
            pending: Vec::new(),
            applied_jobs: BTreeSet::new(),
        }
    }

    pub fn manifest_json(&self) -> String {
        Manifest::from_episode(&self.episode).to_canonical_json()
    }

    fn take_pending_mask(&mut self, object_id: &str, frame: usize) -> Result<RleMask, ApplyError> {
        let pos = self
            .pending
            .iter()
            .rposition(|p| matches!(&p.item, PendingItem::Mask { object_id: o, frame: f, .. } if o == object_id && *f == frame))
            .ok_or_else(|| invalid(format!("no pending mask for {object_id:?} at frame {frame}")))?;
        match self.pending.remove(pos).item {
            PendingItem::Mask { rle, .. } => Ok(rle),
            _ => unreachable!("position matched a mask"),
        }
    }

    fn apply_edit(&mut self, edit: &EditKind) -> Result<(), ApplyError> {
        let e = &mut self.episode;
        let mut touches_geometry = true;
        match edit {
            EditKind::SetContactFrame { frame, object_id } => {
                let contacts = &mut e.annotations.contact_frames;
                let object = match object_id {
                    Some(o) => o.clone(),
                    None => contacts
                        .first()
                        .map(|c| c.object_id.clone())
                        .ok_or_else(|| invalid("object_id is required when no contact exists"))?,
                };
                match contacts.iter_mut().find(|c| c.object_id == object) {
                    Some(c) => c.frame = *frame,
                    None => contacts.push(ContactAnnotation {
                        frame: *frame,
                        object_id: object,
                    }),
                }
            }
            EditKind::AddClip {
                start_frame,
                end_frame,
                skill,
                description,
                object_id,
            } => {
                let object = object_id.as_deref().map_or("the object".to_string(), |o| format!("the {o}"));
                let clip = Clip {
                    start_frame: *start_frame,
                    end_frame: *end_frame,
                    skill: *skill,
                    description: description.clone().unwrap_or_else(|| skill.describe(&object, &[])),
                    object_id: object_id.clone(),
                };
                let clips = &mut e.annotations.clips;
                let at = clips.partition_point(|c| c.start_frame <= clip.start_frame);
                clips.insert(at, clip);
            }
            EditKind::EditClipText { index, description } => {
                clip_mut(e, *index)?.description = description.clone();
                touches_geometry = false;
            }
            EditKind::DeleteClip { index } => {
                clip_mut(e, *index)?;
                e.annotations.clips.remove(*index);
            }
            EditKind::AcceptMask { object_id, frame } => {
                let rle = self.take_pending_mask(object_id, *frame)?;
                let a = &mut self.episode.annotations;
                let entries = a.object_masks.entry(object_id.clone()).or_default();
                match entries.binary_search_by_key(frame, |m| m.frame) {
                    Ok(i) => entries[i].rle = rle,
                    Err(i) => entries.insert(i, MaskEntry { frame: *frame, rle }),
                }
                a.review.consecutive_rejects.remove(object_id);
                a.derived = None;
                return Ok(());
            }
            EditKind::RejectMask { object_id, frame } => {
                self.take_pending_mask(object_id, *frame)?;
                let review = &mut self.episode.annotations.review;
                let n = review.consecutive_rejects.entry(object_id.clone()).or_insert(0);
                *n += 1;
                if *n >= HARD_SAMPLE_REJECTS {
                    review.hard_samples.insert(object_id.clone());
                }
                return Ok(());
            }
            EditKind::SetGlobalDescription { text } => {
                e.annotations.global_description = text.clone();
                touches_geometry = false;
            }
            EditKind::BindObjectToClip { index, object_id } => {
                clip_mut(e, *index)?.object_id = Some(object_id.clone());
            }
        }
        if touches_geometry {
            e.annotations.derived = None;
        }
        Ok(())
    }

    fn apply_job(&mut self, job_id: &str, items: &[PendingItem]) {
        if !self.applied_jobs.insert(job_id.to_string()) {
            return;
        }
        for item in items {
            if let PendingItem::Mask { object_id, frame, .. } = item {
                self.pending.retain(
                    |p| !matches!(&p.item, PendingItem::Mask { object_id: o, frame: f, .. } if o == object_id && f == frame),
                );
            }
            self.pending.push(PendingEntry {
                job_id: job_id.to_string(),
                item: item.clone(),
            });
        }
    }

    /// Applies `action` as revision `self.revision + 1`. On error the state
    /// is unchanged.
    pub fn apply(&mut self, action: &LogAction) -> Result<(), ApplyError> {
        let mut next = self.clone();
        match action {
            LogAction::Edit { edit } => next.apply_edit(edit)?,
            LogAction::JobResult { job_id, items } => next.apply_job(job_id, items),
        }
        next.episode
            .validate()
            .map_err(|e| invalid(format!("edit would break the episode: {e}")))?;
        next.revision += 1;
        *self = next;
        Ok(())
    }

    /// Checks the client's base revision, then applies. Returns the log entry
    /// to persist.
    pub fn apply_edit_request(&mut self, req: &AnnotationEdit) -> Result<LogEntry, ApplyError> {
        if req.revision != self.revision {
            return Err(ApplyError::Conflict {
                given: req.revision,
                current: self.revision,
            });
        }
        let action = LogAction::Edit { edit: req.edit.clone() };
        self.apply(&action)?;
        Ok(LogEntry {
            revision: self.revision,
            editor_id: req.editor_id.clone(),
            action,
        })
    }
}

/// Rebuilds the state reached by `entries` from the base episode.
pub fn replay(base: Episode, entries: &[LogEntry]) -> Result<EpisodeState, ApplyError> {
    replay_from(EpisodeState::new(base), entries)
}

/// Continues replay from a snapshot, skipping entries it already covers.
pub fn replay_from(mut state: EpisodeState, entries: &[LogEntry]) -> Result<EpisodeState, ApplyError> {
    for entry in entries {
        if entry.revision <= state.revision {
            continue;
        }
        if entry.revision != state.revision + 1 {
            return Err(invalid(format!("log revision {} does not follow {}", entry.revision, state.revision)));
        }
        state.apply(&entry.action)?;
    }
    Ok(state)
}
