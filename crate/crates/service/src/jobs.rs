//! In-process FIFO of external jobs served by a fixed number of workers.
//! Each job id is received by exactly one worker.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{mpsc, Mutex, RwLock};

use crate::clients::{parse_plan, ClientError, PreAnnotateRequest, PreAnnotator, SegmentRequest, Segmenter, VideoOnsetRequest, VideoOnsetTracker};
use crate::edits::PendingItem;
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobKind {
    Segment,
    PreAnnotate,
    VideoOnset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalJob {
    pub job_id: String,
    pub kind: JobKind,
    pub episode_id: String,
    pub request: Value,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExternalJob {
    /// Moves the status forward; terminal states never change.
    pub fn advance(&mut self, to: JobStatus) -> Result<(), String> {
        let ok = matches!(
            (self.status, to),
            (JobStatus::Queued, JobStatus::Running) | (JobStatus::Running, JobStatus::Done | JobStatus::Failed)
        );
        if !ok {
            return Err(format!("job {}: {:?} -> {:?} is not allowed", self.job_id, self.status, to));
        }
        self.status = to;
        Ok(())
    }
}

/// Body of `POST /episodes/{id}/jobs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub payload: Value,
}

impl JobRequest {
    /// Checks the payload against the kind's schema.
    pub fn validate(&self) -> Result<(), String> {
        let p = if self.payload.is_null() { json!({}) } else { self.payload.clone() };
        let r = match self.kind {
            JobKind::Segment => serde_json::from_value::<SegmentRequest>(p).map(|_| ()),
            JobKind::PreAnnotate => serde_json::from_value::<PreAnnotateRequest>(p).map(|_| ()),
            JobKind::VideoOnset => serde_json::from_value::<VideoOnsetRequest>(p).map(|_| ()),
        };
        r.map_err(|e| format!("{:?} payload: {e}", self.kind))
    }
}

#[derive(Clone)]
pub struct Clients {
    pub segmenter: Arc<dyn Segmenter>,
    pub pre_annotator: Arc<dyn PreAnnotator>,
    pub tracker: Arc<dyn VideoOnsetTracker>,
}

impl Clients {
    pub fn stubs() -> Self {
        Clients {
            segmenter: Arc::new(crate::clients::StubSegmenter),
            pre_annotator: Arc::new(crate::clients::StubPreAnnotator),
            tracker: Arc::new(crate::clients::StubVideoOnsetTracker),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QueueSettings {
    pub workers: usize,
    pub timeout: Duration,
    pub max_attempts: u32,
}

pub struct JobQueue {
    jobs: RwLock<BTreeMap<String, ExternalJob>>,
    tx: mpsc::UnboundedSender<String>,
    next: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobCounts {
    pub queued: usize,
    pub running: usize,
    pub done: usize,
    pub failed: usize,
}

impl JobQueue {
    /// Creates the queue and spawns its workers on the current runtime.
    pub async fn start(store: Arc<Store>, clients: Clients, settings: QueueSettings) -> Arc<JobQueue> {
        let (tx, rx) = mpsc::unbounded_channel();
        let queue = Arc::new(JobQueue {
            jobs: RwLock::new(BTreeMap::new()),
            tx,
            next: AtomicU64::new(store.max_job_number().await + 1),
        });
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..settings.workers.max(1) {
            let (queue, store, clients, rx) = (queue.clone(), store.clone(), clients.clone(), rx.clone());
            tokio::spawn(async move {
                loop {
                    let next = rx.lock().await.recv().await;
                    let Some(id) = next else { break };
                    queue.process(&id, &store, &clients, settings).await;
                }
            });
        }
        queue
    }

    pub async fn submit(&self, episode_id: &str, req: JobRequest) -> String {
        let n = self.next.fetch_add(1, Ordering::SeqCst);
        let job_id = format!("job-{n:06}");
        let job = ExternalJob {
            job_id: job_id.clone(),
            kind: req.kind,
            episode_id: episode_id.to_string(),
            request: if req.payload.is_null() { json!({}) } else { req.payload },
            status: JobStatus::Queued,
            result: None,
            attempts: 0,
            error: None,
        };
        self.jobs.write().await.insert(job_id.clone(), job);
        // the receiver lives as long as the workers; a closed channel leaves the job queued
        let _ = self.tx.send(job_id.clone());
        job_id
    }

    pub async fn get(&self, job_id: &str) -> Option<ExternalJob> {
        self.jobs.read().await.get(job_id).cloned()
    }

    pub async fn counts(&self) -> JobCounts {
        let mut c = JobCounts::default();
        for j in self.jobs.read().await.values() {
            match j.status {
                JobStatus::Queued => c.queued += 1,
                JobStatus::Running => c.running += 1,
                JobStatus::Done => c.done += 1,
                JobStatus::Failed => c.failed += 1,
            }
        }
        c
    }

    async fn update(&self, job_id: &str, f: impl FnOnce(&mut ExternalJob)) {
        if let Some(j) = self.jobs.write().await.get_mut(job_id) {
            f(j);
        }
    }

    async fn process(&self, job_id: &str, store: &Store, clients: &Clients, settings: QueueSettings) {
        let Some(job) = self.get(job_id).await else { return };
        self.update(job_id, |j| j.advance(JobStatus::Running).expect("queued job starts")).await;
        let mut last = ClientError::Timeout;
        let mut outcome = None;
        for attempt in 1..=settings.max_attempts.max(1) {
            self.update(job_id, |j| j.attempts = attempt).await;
            let call = run_client(&job, store, clients);
            match tokio::time::timeout(settings.timeout, call).await {
                Ok(Ok(r)) => {
                    outcome = Some(r);
                    break;
                }
                Ok(Err(ClientError::Invalid(m))) => {
                    last = ClientError::Invalid(m);
                    break;
                }
                Ok(Err(e)) => last = e,
                Err(_) => last = ClientError::Timeout,
            }
        }
        let final_state = match outcome {
            Some((items, result)) => match store.apply_job_result(&job.episode_id, job_id, items).await {
                Ok(_) => Ok(result),
                Err(e) => Err(e.to_string()),
            },
            None => Err(match last {
                ClientError::Timeout => "ClientTimeoutError".to_string(),
                e => e.to_string(),
            }),
        };
        self.update(job_id, |j| match final_state {
            Ok(result) => {
                j.result = Some(result);
                j.advance(JobStatus::Done).expect("running job finishes");
            }
            Err(e) => {
                j.error = Some(e);
                j.advance(JobStatus::Failed).expect("running job finishes");
            }
        })
        .await;
    }
}

async fn run_client(job: &ExternalJob, store: &Store, clients: &Clients) -> Result<(Vec<PendingItem>, Value), ClientError> {
    let (width, height, description, frames) = {
        let cell = store.get(&job.episode_id).map_err(|e| ClientError::Invalid(e.to_string()))?;
        let s = cell.lock().await;
        let e = &s.episode;
        (e.camera.width, e.camera.height, e.annotations.global_description.clone(), e.num_frames())
    };
    let bad = |e: serde_json::Error| ClientError::Invalid(e.to_string());
    match job.kind {
        JobKind::Segment => {
            let req: SegmentRequest = serde_json::from_value(job.request.clone()).map_err(bad)?;
            if req.end_frame.unwrap_or(req.start_frame) >= frames {
                return Err(ClientError::Invalid("frame range exceeds the episode".into()));
            }
            let masks = clients.segmenter.segment(&req, width, height).await?;
            let result = json!({ "object_id": req.object_id, "frames": masks.iter().map(|m| m.frame).collect::<Vec<_>>() });
            let items = masks
                .into_iter()
                .map(|m| PendingItem::Mask {
                    object_id: req.object_id.clone(),
                    frame: m.frame,
                    rle: m.rle,
                })
                .collect();
            Ok((items, result))
        }
        JobKind::PreAnnotate => {
            let req: PreAnnotateRequest = serde_json::from_value(job.request.clone()).map_err(bad)?;
            let task = req.task.unwrap_or(description);
            let raw = clients.pre_annotator.pre_annotate(&task, req.first_frame).await?;
            let steps = parse_plan(&raw)?;
            let result = json!({ "raw": raw, "steps": steps });
            Ok((vec![PendingItem::Plan { steps }], result))
        }
        JobKind::VideoOnset => {
            let req: VideoOnsetRequest = serde_json::from_value(job.request.clone()).map_err(bad)?;
            if req.end_frame >= frames {
                return Err(ClientError::Invalid("frame range exceeds the episode".into()));
            }
            let frame = clients.tracker.onset(&req).await?;
            Ok((vec![PendingItem::Onset { frame }], json!({ "frame": frame })))
        }
    }
}
