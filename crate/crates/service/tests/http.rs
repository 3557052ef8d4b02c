use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use demokit_core::episode::fixtures::tiny_episode;
use demokit_core::episode::{decode_mask, load_episode, mask_bbox_centroid, save_episode, Manifest};
use demokit_service::api::{router, AppState, REVISION_HEADER};
use demokit_service::edits::{replay, PendingItem};
use demokit_service::jobs::Clients;
use demokit_service::store::read_log;
use demokit_service::ServiceConfig;
use serde_json::{json, Value};
use tower::ServiceExt;

const ID: &str = "tiny_000";

fn seed_root(root: &Path) {
    let e = tiny_episode(10);
    std::fs::create_dir_all(root.join("episodes")).unwrap();
    save_episode(&e, root.join("episodes").join(format!("{ID}.json"))).unwrap();
}

async fn app(root: &Path, snapshot_every: u64) -> Router {
    let config = ServiceConfig {
        data_root: root.to_path_buf(),
        snapshot_every,
        client_timeout: Duration::from_secs(5),
        ..Default::default()
    };
    router(AppState::open(&config, Clients::stubs()).await.unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, bytes)
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn edit(kind: &str, payload: Value, revision: u64) -> Value {
    json!({"kind": kind, "payload": payload, "editor_id": "annotator-1", "revision": revision})
}

async fn wait_done(app: &Router, job_id: &str) -> Value {
    for _ in 0..200 {
        let (s, _, b) = call(app, "GET", &format!("/jobs/{job_id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let job = as_json(&b);
        if job["status"] == "Done" || job["status"] == "Failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job_id} did not finish");
}

/// Lattice points of a disc of integer radius, counted column by column.
fn disc_area(r: i64) -> usize {
    (-r..=r).map(|dx| 2 * (((r * r - dx * dx) as f64).sqrt().floor() as usize) + 1).sum()
}

#[tokio::test]
async fn contact_frame_write_then_read() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let app = app(dir.path(), 20).await;
    let (s, _, b) = call(&app, "POST", &format!("/episodes/{ID}/edits"), Some(edit("SetContactFrame", json!({"frame": 7}), 0))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    assert_eq!(as_json(&b)["revision"], 1);
    let (s, h, b) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h[REVISION_HEADER], "1");
    let m = as_json(&b);
    let contacts = m["annotations"]["contact_frames"].as_array().unwrap();
    assert!(contacts.iter().any(|c| c["frame"] == 7 && c["object_id"] == "cup"));
}

#[tokio::test]
async fn concurrent_edits_on_one_revision_conflict_once() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let app = app(dir.path(), 20).await;
    let uri = format!("/episodes/{ID}/edits");
    let tasks: Vec<_> = (0..8)
        .map(|i| {
            let (app, uri) = (app.clone(), uri.clone());
            tokio::spawn(async move { call(&app, "POST", &uri, Some(edit("SetGlobalDescription", json!({"text": format!("task {i}")}), 0))).await })
        })
        .collect();
    let mut statuses = Vec::new();
    for t in tasks {
        let (s, _, b) = t.await.unwrap();
        if s == StatusCode::CONFLICT {
            assert_eq!(as_json(&b)["current_revision"], 1);
        }
        statuses.push(s);
    }
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1);
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 7);
    assert_eq!(read_log(&dir.path().join("edits").join(format!("{ID}.jsonl"))).unwrap().len(), 1);
}

#[tokio::test]
async fn stub_segment_job_lands_as_pending_only() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let app = app(dir.path(), 20).await;
    let (_, _, before) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    let payload = json!({"object_id": "cup", "points": [[30.0, 20.0]], "start_frame": 1, "end_frame": 2, "radius": 5.0});
    let (s, _, b) = call(&app, "POST", &format!("/episodes/{ID}/jobs"), Some(json!({"kind": "Segment", "payload": payload}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job_id = as_json(&b)["job_id"].as_str().unwrap().to_string();
    let job = wait_done(&app, &job_id).await;
    assert_eq!(job["status"], "Done", "{job}");
    assert_eq!(job["attempts"], 1);

    let (_, _, after) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    let (mb, ma) = (as_json(&before), as_json(&after));
    assert_eq!(mb["annotations"]["masks"], ma["annotations"]["masks"]);

    let (_, _, b) = call(&app, "GET", &format!("/episodes/{ID}/review"), None).await;
    let review = as_json(&b);
    let pending = review["pending"].as_array().unwrap();
    assert_eq!(pending.len(), 2);
    for p in pending {
        let item: PendingItem = serde_json::from_value(p["item"].clone()).unwrap();
        let PendingItem::Mask { rle, .. } = item else { panic!("expected a mask") };
        assert_eq!(decode_mask(&rle).unwrap().count(), disc_area(5));
        let (_, c) = mask_bbox_centroid(&rle).unwrap();
        assert!((c.x - 30.0).abs() < 1e-9 && (c.y - 20.0).abs() < 1e-9);
    }

    // accepting moves exactly one mask into the annotations
    let (s, _, _) = call(&app, "POST", &format!("/episodes/{ID}/edits"), Some(edit("AcceptMask", json!({"object_id": "cup", "frame": 2}), 1))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, _, b) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    let frames: Vec<u64> = as_json(&b)["annotations"]["masks"]["cup"].as_array().unwrap().iter().map(|m| m["frame"].as_u64().unwrap()).collect();
    assert_eq!(frames, vec![1, 2]);
}

#[tokio::test]
async fn log_replay_reproduces_manifest_bytes() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let app = app(dir.path(), 3).await;
    let uri = format!("/episodes/{ID}/edits");
    let edits = [
        edit("DeleteClip", json!({"index": 0}), 0),
        edit("AddClip", json!({"start_frame": 0, "end_frame": 4, "skill": "pick", "object_id": "cup"}), 1),
        edit("AddClip", json!({"start_frame": 4, "end_frame": 9, "skill": "place", "object_id": "cup"}), 2),
        edit("SetContactFrame", json!({"frame": 3}), 3),
        edit("EditClipText", json!({"index": 0, "description": "grab the cup"}), 4),
    ];
    for e in edits {
        let (s, _, b) = call(&app, "POST", &uri, Some(e)).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    }
    let payload = json!({"object_id": "cup", "points": [[10.0, 10.0]], "start_frame": 3});
    let (_, _, b) = call(&app, "POST", &format!("/episodes/{ID}/jobs"), Some(json!({"kind": "Segment", "payload": payload}))).await;
    wait_done(&app, as_json(&b)["job_id"].as_str().unwrap()).await;
    for (i, kind) in ["RejectMask", "SetContactFrame"].iter().enumerate() {
        let payload = if i == 0 { json!({"object_id": "cup", "frame": 3}) } else { json!({"frame": 2}) };
        let (s, _, _) = call(&app, "POST", &uri, Some(edit(kind, payload, 6 + i as u64))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, h, served) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    assert_eq!(h[REVISION_HEADER], "8");

    let base = load_episode(dir.path().join("episodes").join(format!("{ID}.json"))).unwrap();
    let log = read_log(&dir.path().join("edits").join(format!("{ID}.jsonl"))).unwrap();
    assert_eq!(log.len(), 8);
    let replayed = replay(base, &log).unwrap();
    assert_eq!(replayed.manifest_json().as_bytes(), served.as_slice());
    assert_eq!(Manifest::from_episode(&replayed.episode).to_canonical_json().as_bytes(), served.as_slice());

    // a restart restores from the snapshot plus the log tail
    assert!(dir.path().join("snapshots").join(format!("{ID}.json")).exists());
    let restarted = self::app(dir.path(), 3).await;
    let (_, h, again) = call(&restarted, "GET", &format!("/episodes/{ID}"), None).await;
    assert_eq!(h[REVISION_HEADER], "8");
    assert_eq!(again, served);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let app = app(dir.path(), 20).await;
    let uri = format!("/episodes/{ID}/edits");

    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"kind": "DeleteClip", "payload": {"frame": 1}, "editor_id": "a", "revision": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, "POST", "/episodes/nope/edits", Some(edit("DeleteClip", json!({"index": 0}), 0))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, "POST", &uri, Some(edit("SetContactFrame", json!({"frame": 10}), 0))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, "POST", &uri, Some(edit("AddClip", json!({"start_frame": 6, "end_frame": 3, "skill": "pick"}), 0))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, b) = call(&app, "POST", &uri, Some(edit("DeleteClip", json!({"index": 0}), 4))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(as_json(&b)["current_revision"], 0);
    // rejected edits leave nothing behind
    let (_, h, _) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    assert_eq!(h[REVISION_HEADER], "0");

    let (s, _, _) = call(&app, "POST", &format!("/episodes/{ID}/jobs"), Some(json!({"kind": "VideoOnset", "payload": {"start_frame": 0}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, "GET", "/jobs/job-999999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, h, b) = call(&app, "GET", &format!("/episodes/{ID}/frames/3"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["content-type"], "image/png");
    assert_eq!(&b[1..4], b"PNG");
    let (s, _, _) = call(&app, "GET", &format!("/episodes/{ID}/frames/10"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, "GET", &format!("/episodes/{ID}/overlay/1?layers=masks,trace"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _, _) = call(&app, "GET", &format!("/episodes/{ID}/overlay/1?layers=heatmap"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, "GET", "/episodes?split=test", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn onset_and_preannotate_jobs_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    std::fs::write(dir.path().join("eval_ids.txt"), format!("{ID}\n")).unwrap();
    let app = app(dir.path(), 20).await;
    let jobs = format!("/episodes/{ID}/jobs");
    let signal: Vec<f64> = (0..8).map(|i| if i >= 3 { 1.0 } else { 0.0 }).collect();
    let (_, _, b) = call(&app, "POST", &jobs, Some(json!({"kind": "VideoOnset", "payload": {"start_frame": 2, "end_frame": 9, "signal": signal, "threshold": 0.5}}))).await;
    let job = wait_done(&app, as_json(&b)["job_id"].as_str().unwrap()).await;
    assert_eq!(job["result"]["frame"], 5);
    let (_, _, b) = call(&app, "POST", &jobs, Some(json!({"kind": "PreAnnotate"}))).await;
    let job = wait_done(&app, as_json(&b)["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "Done", "{job}");
    let steps = job["result"]["steps"].as_array().unwrap();
    assert_eq!(steps[0]["skill"], "pick");

    let (_, _, b) = call(&app, "GET", "/episodes?split=eval&status=pending", None).await;
    let page = as_json(&b);
    assert_eq!(page["total"], 1);
    assert_eq!(page["episodes"][0]["pending"], 2);
    let (_, _, b) = call(&app, "GET", "/episodes?split=train", None).await;
    assert_eq!(as_json(&b)["total"], 0);

    let (s, _, b) = call(&app, "GET", "/progress", None).await;
    assert_eq!(s, StatusCode::OK);
    let p = as_json(&b);
    assert_eq!(p["episodes"], 1);
    assert_eq!(p["eval"], 1);
    assert_eq!(p["pending_review"], 1);
    assert_eq!(p["jobs"]["done"], 2);
    assert_eq!(p["edits"], 2);
    // one episode cannot fill the default QC subsets
    assert!(p["qc_error"].is_string());
}

struct SlowSegmenter;

#[async_trait::async_trait]
impl demokit_service::clients::Segmenter for SlowSegmenter {
    async fn segment(
        &self,
        _req: &demokit_service::clients::SegmentRequest,
        _w: u32,
        _h: u32,
    ) -> Result<Vec<demokit_core::episode::MaskEntry>, demokit_service::clients::ClientError> {
        tokio::time::sleep(Duration::from_secs(5)).await;
        Ok(Vec::new())
    }
}

#[tokio::test]
async fn client_timeouts_fail_the_job_after_retries() {
    let dir = tempfile::tempdir().unwrap();
    seed_root(dir.path());
    let config = ServiceConfig {
        data_root: dir.path().to_path_buf(),
        client_timeout: Duration::from_millis(30),
        max_attempts: 2,
        ..Default::default()
    };
    let clients = Clients {
        segmenter: std::sync::Arc::new(SlowSegmenter),
        ..Clients::stubs()
    };
    let app = router(AppState::open(&config, clients).await.unwrap());
    let payload = json!({"object_id": "cup", "points": [[30.0, 20.0]], "start_frame": 1});
    let (_, _, b) = call(&app, "POST", &format!("/episodes/{ID}/jobs"), Some(json!({"kind": "Segment", "payload": payload}))).await;
    let job = wait_done(&app, as_json(&b)["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "Failed");
    assert_eq!(job["attempts"], 2);
    assert_eq!(job["error"], "ClientTimeoutError");
    let (_, h, _) = call(&app, "GET", &format!("/episodes/{ID}"), None).await;
    assert_eq!(h[REVISION_HEADER], "0");
}
