//! HTTP routes.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use demokit_core::config::QcConfig;
use demokit_core::episode::{mask_bbox_centroid, Episode};
use demokit_core::geometry::Rect;
use demokit_core::kinematics::gripper_bbox;
use demokit_core::overlay::{blank_frame, encode_png, render_overlay, OverlaySpec, Primitive, GREEN, ORANGE, PURPLE, RED};
use demokit_core::qc::{qc_sample, QcReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::edits::{AnnotationEdit, ApplyError, EpisodeState, PendingEntry, PendingItem};
use crate::jobs::{JobCounts, JobQueue, JobRequest};
use crate::store::{Store, StoreError};

pub const REVISION_HEADER: &str = "x-revision";
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
pub const DEFAULT_LAYERS: &str = "trace,gripper,affordance,masks";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub jobs: Arc<JobQueue>,
    pub qc: QcConfig,
    pub qc_seed: u64,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub extra: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            extra: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownEpisode(_) => ApiError::not_found(e.to_string()),
            StoreError::Apply(ApplyError::Conflict { given, current }) => ApiError {
                status: StatusCode::CONFLICT,
                message: format!("stale revision {given}, current is {current}"),
                extra: Some(json!({ "current_revision": current })),
            },
            StoreError::Apply(ApplyError::Invalid(m)) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(Value::Object(extra)) = self.extra {
            body.as_object_mut().expect("object").extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/episodes", get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/review", get(get_review))
        .route("/episodes/{id}/frames/{k}", get(get_frame))
        .route("/episodes/{id}/overlay/{k}", get(get_overlay))
        .route("/episodes/{id}/edits", post(post_edit))
        .route("/episodes/{id}/jobs", post(post_job))
        .route("/jobs/{id}", get(get_job))
        .route("/progress", get(get_progress))
        .with_state(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// `pending`: job output awaiting review; `hard`: flagged hard samples;
/// `complete`: neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Hard,
    Complete,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListParams {
    pub split: Option<Split>,
    pub status: Option<ReviewStatus>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub robot_id: String,
    pub split: Split,
    pub status: ReviewStatus,
    pub revision: u64,
    pub num_frames: usize,
    pub num_clips: usize,
    pub num_contacts: usize,
    pub masked_objects: usize,
    pub pending: usize,
    pub hard_samples: usize,
    pub derived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub episodes: Vec<EpisodeSummary>,
}

fn review_status(s: &EpisodeState) -> ReviewStatus {
    if !s.pending.is_empty() {
        ReviewStatus::Pending
    } else if !s.episode.annotations.review.hard_samples.is_empty() {
        ReviewStatus::Hard
    } else {
        ReviewStatus::Complete
    }
}

fn summarize(store: &Store, s: &EpisodeState) -> EpisodeSummary {
    let e = &s.episode;
    let a = &e.annotations;
    EpisodeSummary {
        episode_id: e.episode_id.clone(),
        robot_id: e.robot_id.clone(),
        split: if store.is_eval(&e.episode_id) { Split::Eval } else { Split::Train },
        status: review_status(s),
        revision: s.revision,
        num_frames: e.num_frames(),
        num_clips: a.clips.len(),
        num_contacts: a.contact_frames.len(),
        masked_objects: a.object_masks.len(),
        pending: s.pending.len(),
        hard_samples: a.review.hard_samples.len(),
        derived: a.derived.is_some(),
    }
}

async fn summaries(store: &Store) -> Vec<EpisodeSummary> {
    let mut out = Vec::new();
    for id in store.ids() {
        let cell = store.get(id).expect("listed id exists");
        let s = cell.lock().await;
        out.push(summarize(store, &s));
    }
    out
}

async fn list_episodes(State(app): State<AppState>, Query(p): Query<ListParams>) -> ApiResult<Json<EpisodePage>> {
    let page = p.page.unwrap_or(0);
    let page_size = p.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
    }
    let all: Vec<EpisodeSummary> = summaries(&app.store)
        .await
        .into_iter()
        .filter(|s| p.split.is_none_or(|x| x == s.split))
        .filter(|s| p.status.is_none_or(|x| x == s.status))
        .collect();
    let total = all.len();
    let episodes = all.into_iter().skip(page.saturating_mul(page_size)).take(page_size).collect();
    Ok(Json(EpisodePage {
        page,
        page_size,
        total,
        episodes,
    }))
}

async fn get_episode(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let cell = app.store.get(&id)?;
    let s = cell.lock().await;
    let mut resp = (
        [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))],
        s.manifest_json(),
    )
        .into_response();
    resp.headers_mut().insert(REVISION_HEADER, HeaderValue::from(s.revision));
    Ok(resp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewView {
    pub episode_id: String,
    pub revision: u64,
    pub pending: Vec<PendingEntry>,
    pub consecutive_rejects: BTreeMap<String, u32>,
    pub hard_samples: Vec<String>,
}

async fn get_review(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ReviewView>> {
    let cell = app.store.get(&id)?;
    let s = cell.lock().await;
    let r = &s.episode.annotations.review;
    Ok(Json(ReviewView {
        episode_id: id,
        revision: s.revision,
        pending: s.pending.clone(),
        consecutive_rejects: r.consecutive_rejects.clone(),
        hard_samples: r.hard_samples.iter().cloned().collect(),
    }))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], bytes).into_response()
}

/// Frame `k` as an RGB image: the stored file when it exists and matches
/// the camera size, otherwise a blank canvas.
fn load_frame(store: &Store, e: &Episode, k: usize) -> image::RgbImage {
    let (w, h) = (e.camera.width, e.camera.height);
    let path = store.root().join("frames").join(e.frame_ref(k));
    match image::open(&path) {
        Ok(im) if im.width() == w && im.height() == h => im.to_rgb8(),
        _ => blank_frame(w, h),
    }
}

async fn get_frame(State(app): State<AppState>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Response> {
    let cell = app.store.get(&id)?;
    let e = cell.lock().await.episode.clone();
    if k >= e.num_frames() {
        return Err(ApiError::not_found(format!("frame {k} out of range ({} frames)", e.num_frames())));
    }
    let path = app.store.root().join("frames").join(e.frame_ref(k));
    match std::fs::read(&path) {
        Ok(bytes) => Ok(png(bytes)),
        Err(_) => Ok(png(encode_png(&blank_frame(e.camera.width, e.camera.height)))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Layer {
    Trace,
    Gripper,
    Affordance,
    Masks,
    Pending,
}

impl std::str::FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "trace" => Layer::Trace,
            "gripper" => Layer::Gripper,
            "affordance" => Layer::Affordance,
            "masks" => Layer::Masks,
            "pending" => Layer::Pending,
            other => return Err(format!("unknown layer {other:?}")),
        })
    }
}

pub fn parse_layers(text: &str) -> Result<Vec<Layer>, String> {
    let mut out: Vec<Layer> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Primitives for the requested layers at frame `k`; layers without data
/// at that frame contribute nothing.
pub fn layer_spec(s: &EpisodeState, k: usize, layers: &[Layer]) -> OverlaySpec {
    let e = &s.episode;
    let a = &e.annotations;
    let (w, h) = (e.camera.width, e.camera.height);
    let mut primitives = Vec::new();
    let mask_box = |rle| mask_bbox_centroid(rle).ok().map(|(r, _): (Rect, _)| r);
    for layer in layers {
        match layer {
            Layer::Trace => {
                if let Some(trace) = &a.trace2d {
                    let points: Vec<_> = trace.iter().flatten().copied().collect();
                    if points.len() >= 2 {
                        primitives.push(Primitive::Polyline { points });
                    }
                }
            }
            Layer::Gripper => {
                let from_derived = a.derived.as_ref().and_then(|d| d.gripper_boxes.get(k).copied().flatten());
                let from_keypoints = || a.keypoints2d.as_ref().and_then(|kp| kp.get(k)).and_then(|kp| gripper_bbox(kp, w, h).ok());
                if let Some(rect) = from_derived.or_else(from_keypoints) {
                    primitives.push(Primitive::Box { color: ORANGE, rect });
                }
            }
            Layer::Affordance => {
                for g in a.derived.iter().flat_map(|d| &d.grasps) {
                    primitives.push(Primitive::Box {
                        color: PURPLE,
                        rect: g.affordance_box,
                    });
                }
            }
            Layer::Masks => {
                for masks in a.object_masks.values() {
                    for m in masks.iter().filter(|m| m.frame == k) {
                        if let Some(rect) = mask_box(&m.rle) {
                            primitives.push(Primitive::Box { color: GREEN, rect });
                        }
                    }
                }
            }
            Layer::Pending => {
                for p in &s.pending {
                    if let PendingItem::Mask { frame, rle, .. } = &p.item {
                        if *frame == k {
                            if let Some(rect) = mask_box(rle) {
                                primitives.push(Primitive::Box { color: RED, rect });
                            }
                        }
                    }
                }
            }
        }
    }
    OverlaySpec { primitives }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayParams {
    pub layers: Option<String>,
}

async fn get_overlay(
    State(app): State<AppState>,
    Path((id, k)): Path<(String, usize)>,
    Query(p): Query<OverlayParams>,
) -> ApiResult<Response> {
    let layers = parse_layers(p.layers.as_deref().unwrap_or(DEFAULT_LAYERS)).map_err(ApiError::bad_request)?;
    let cell = app.store.get(&id)?;
    let s = cell.lock().await.clone();
    let e = &s.episode;
    if k >= e.num_frames() {
        return Err(ApiError::not_found(format!("frame {k} out of range ({} frames)", e.num_frames())));
    }
    let (w, h) = (e.camera.width, e.camera.height);
    let spec = layer_spec(&s, k, &layers).clamped(w, h);
    let base = load_frame(&app.store, e, k);
    let drawn = render_overlay(&base, &spec, (w, h)).map_err(|err| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()))?;
    Ok(png(encode_png(&drawn)))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn post_edit(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: AnnotationEdit = parse_body(&body)?;
    if let Some(eid) = &req.episode_id {
        if eid != &id {
            return Err(ApiError::bad_request(format!("episode_id {eid:?} does not match path {id:?}")));
        }
    }
    let entry = app.store.edit(&id, &req).await?;
    Ok(Json(json!({ "episode_id": id, "revision": entry.revision })))
}

async fn post_job(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: JobRequest = parse_body(&body)?;
    req.validate().map_err(ApiError::bad_request)?;
    app.store.get(&id)?;
    let job_id = app.jobs.submit(&id, req).await;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn get_job(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = app.jobs.get(&id).await.ok_or_else(|| ApiError::not_found(format!("unknown job {id:?}")))?;
    Ok(Json(serde_json::to_value(job).expect("jobs serialize")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub episodes: usize,
    pub train: usize,
    pub eval: usize,
    pub complete: usize,
    pub pending_review: usize,
    pub hard: usize,
    pub with_contacts: usize,
    pub with_clips: usize,
    pub with_masks: usize,
    pub derived: usize,
    pub pending_items: usize,
    pub edits: u64,
    pub jobs: JobCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc: Option<QcReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_error: Option<String>,
}

/// An episode counts as valid for QC once it is fully reviewed and carries
/// clips, a contact and derived annotations.
fn qc_valid(s: &EpisodeSummary) -> bool {
    s.status == ReviewStatus::Complete && s.num_clips > 0 && s.num_contacts > 0 && s.derived
}

async fn get_progress(State(app): State<AppState>) -> Json<Progress> {
    let all = summaries(&app.store).await;
    let count = |f: &dyn Fn(&EpisodeSummary) -> bool| all.iter().filter(|s| f(s)).count();
    let validity: BTreeMap<String, bool> = all.iter().map(|s| (s.episode_id.clone(), qc_valid(s))).collect();
    let (qc, qc_error) = match qc_sample(&validity, &app.qc, app.qc_seed) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Json(Progress {
        episodes: all.len(),
        train: count(&|s| s.split == Split::Train),
        eval: count(&|s| s.split == Split::Eval),
        complete: count(&|s| s.status == ReviewStatus::Complete),
        pending_review: count(&|s| s.status == ReviewStatus::Pending),
        hard: count(&|s| s.hard_samples > 0),
        with_contacts: count(&|s| s.num_contacts > 0),
        with_clips: count(&|s| s.num_clips > 0),
        with_masks: count(&|s| s.masked_objects > 0),
        derived: count(&|s| s.derived),
        pending_items: all.iter().map(|s| s.pending).sum(),
        edits: all.iter().map(|s| s.revision).sum(),
        jobs: app.jobs.counts().await,
        qc,
        qc_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_names() {
        assert_eq!(parse_layers("masks, trace,masks").unwrap(), vec![Layer::Trace, Layer::Masks]);
        assert!(parse_layers("trace,heatmap").is_err());
        assert!(parse_layers("").unwrap().is_empty());
    }

    #[test]
    fn gripper_layer_falls_back_to_keypoints() {
        let e = demokit_core::episode::fixtures::tiny_episode(4);
        let s = EpisodeState::new(e);
        let spec = layer_spec(&s, 0, &[Layer::Gripper, Layer::Affordance]);
        // the fixture has no projection and no derived data
        assert!(spec.is_empty());
    }
}
