//! External annotation clients: segmenter, language pre-annotator and video
//! onset tracker. Stubs are deterministic; remote clients speak the same
//! contract over HTTP.

use std::sync::OnceLock;

use async_trait::async_trait;
use demokit_core::episode::{encode_mask, BinaryGrid, MaskEntry};
use demokit_core::skills::PrimitiveSkill;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::edits::PlanStep;

pub const DEFAULT_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("client timed out")]
    Timeout,
    #[error("remote error: {0}")]
    Remote(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub object_id: String,
    /// Prompt points `[x, y]`; the first one seeds the stub.
    pub points: Vec<[f64; 2]>,
    pub start_frame: usize,
    /// Inclusive; defaults to `start_frame`.
    #[serde(default)]
    pub end_frame: Option<usize>,
    #[serde(default)]
    pub radius: Option<f64>,
    /// Passed through to the segmenter untouched (e.g. tracking direction).
    #[serde(default)]
    pub mode: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreAnnotateRequest {
    /// Defaults to the episode's global description.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub first_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoOnsetRequest {
    pub start_frame: usize,
    pub end_frame: usize,
    /// Motion proxy per frame of `start_frame..=end_frame`.
    pub signal: Vec<f64>,
    pub threshold: f64,
}

#[async_trait]
pub trait Segmenter: Send + Sync {
    async fn segment(&self, req: &SegmentRequest, width: u32, height: u32) -> Result<Vec<MaskEntry>, ClientError>;
}

#[async_trait]
pub trait PreAnnotator: Send + Sync {
    /// Raw model text: a fenced JSON list of step phrases.
    async fn pre_annotate(&self, task: &str, first_frame: usize) -> Result<String, ClientError>;
}

#[async_trait]
pub trait VideoOnsetTracker: Send + Sync {
    async fn onset(&self, req: &VideoOnsetRequest) -> Result<usize, ClientError>;
}

/// Filled disc of `radius` around `center`, clipped to the image.
pub fn disc_mask(center: [f64; 2], radius: f64, width: u32, height: u32) -> BinaryGrid {
    let mut g = BinaryGrid::new(width, height);
    let r2 = radius * radius;
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
            if dx * dx + dy * dy <= r2 {
                g.set(x, y, true);
            }
        }
    }
    g
}

pub struct StubSegmenter;

#[async_trait]
impl Segmenter for StubSegmenter {
    async fn segment(&self, req: &SegmentRequest, width: u32, height: u32) -> Result<Vec<MaskEntry>, ClientError> {
        let p = *req.points.first().ok_or_else(|| ClientError::Invalid("no prompt point".into()))?;
        let radius = req.radius.unwrap_or(DEFAULT_RADIUS);
        let grid = disc_mask(p, radius, width, height);
        if grid.count() == 0 {
            return Err(ClientError::Invalid("prompt disc lies outside the image".into()));
        }
        let rle = encode_mask(&grid).map_err(|e| ClientError::Invalid(e.to_string()))?;
        let end = req.end_frame.unwrap_or(req.start_frame);
        Ok((req.start_frame..=end)
            .map(|frame| MaskEntry { frame, rle: rle.clone() })
            .collect())
    }
}

/// Echoes a pick / transfer / place plan for the task's first object, in the
/// fenced-JSON reply format, followed by the task in angle brackets.
pub struct StubPreAnnotator;

fn task_object(task: &str) -> String {
    let words: Vec<&str> = task.split_whitespace().collect();
    match words.iter().position(|w| w.eq_ignore_ascii_case("the")) {
        Some(i) if i + 1 < words.len() => format!("the {}", words[i + 1]),
        _ => "the object".to_string(),
    }
}

pub fn stub_plan(task: &str) -> Vec<String> {
    let obj = task_object(task);
    vec![
        PrimitiveSkill::Pick.describe(&obj, &[]),
        PrimitiveSkill::MoveWithObject.describe(&obj, &["its position", "the target"]),
        PrimitiveSkill::Place.describe(&obj, &["at the target"]),
    ]
}

#[async_trait]
impl PreAnnotator for StubPreAnnotator {
    async fn pre_annotate(&self, task: &str, _first_frame: usize) -> Result<String, ClientError> {
        let body = serde_json::to_string_pretty(&stub_plan(task)).expect("strings serialize");
        Ok(format!("```json\n{body}\n```\n<{}>", task.trim()))
    }
}

pub struct StubVideoOnsetTracker;

#[async_trait]
impl VideoOnsetTracker for StubVideoOnsetTracker {
    async fn onset(&self, req: &VideoOnsetRequest) -> Result<usize, ClientError> {
        if req.end_frame < req.start_frame || req.signal.len() != req.end_frame - req.start_frame + 1 {
            return Err(ClientError::Invalid("signal must cover start_frame..=end_frame".into()));
        }
        req.signal
            .iter()
            .position(|&s| s > req.threshold)
            .map(|i| req.start_frame + i)
            .ok_or_else(|| ClientError::Remote("signal never exceeds the threshold".into()))
    }
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```json\s*(.*?)```").unwrap())
}

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""((?:[^"\\]|\\.)*)""#).unwrap())
}

/// Step phrases from the first fenced JSON block. Accepts a JSON list, or
/// the brace-delimited list of strings used in the prompt's examples.
pub fn parse_plan(text: &str) -> Result<Vec<PlanStep>, ClientError> {
    let block = fence_re()
        .captures(text)
        .map(|c| c[1].trim().to_string())
        .ok_or_else(|| ClientError::Remote("no fenced json block".into()))?;
    let phrases: Vec<String> = match serde_json::from_str::<Vec<String>>(&block) {
        Ok(v) => v,
        Err(_) if block.starts_with('{') && block.ends_with('}') => quoted_re()
            .captures_iter(&block)
            .map(|c| serde_json::from_str::<String>(&format!("\"{}\"", &c[1])).map_err(|e| ClientError::Remote(e.to_string())))
            .collect::<Result<_, _>>()?,
        Err(e) => return Err(ClientError::Remote(format!("plan is not a list of strings: {e}"))),
    };
    if phrases.is_empty() {
        return Err(ClientError::Remote("empty plan".into()));
    }
    Ok(phrases
        .into_iter()
        .map(|text| PlanStep {
            skill: PrimitiveSkill::guess_from_phrase(&text),
            text,
        })
        .collect())
}

/// HTTP client for a remote service implementing one of the contracts:
/// `POST {base}/segment`, `/pre_annotate`, `/onset`.
pub struct RemoteClient {
    base: String,
    http: reqwest::Client,
}

impl RemoteClient {
    pub fn new(base: impl Into<String>, timeout: std::time::Duration) -> Self {
        RemoteClient {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::builder().timeout(timeout).build().expect("http client builds"),
        }
    }

    async fn post<B: Serialize + Sync, R: serde::de::DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ClientError> {
        let resp = self
            .http
            .post(format!("{}/{path}", self.base))
            .json(body)
            .send()
            .await
            .map_err(|e| if e.is_timeout() { ClientError::Timeout } else { ClientError::Remote(e.to_string()) })?;
        if !resp.status().is_success() {
            return Err(ClientError::Remote(format!("{path}: HTTP {}", resp.status())));
        }
        resp.json().await.map_err(|e| ClientError::Remote(e.to_string()))
    }
}

#[derive(Serialize)]
struct RemoteSegment<'a> {
    request: &'a SegmentRequest,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RemoteText {
    text: String,
}

#[derive(Serialize)]
struct RemotePreAnnotate<'a> {
    task: &'a str,
    first_frame: usize,
}

#[derive(Serialize, Deserialize)]
struct RemoteOnset {
    frame: usize,
}

#[async_trait]
impl Segmenter for RemoteClient {
    async fn segment(&self, req: &SegmentRequest, width: u32, height: u32) -> Result<Vec<MaskEntry>, ClientError> {
        self.post("segment", &RemoteSegment { request: req, width, height }).await
    }
}

#[async_trait]
impl PreAnnotator for RemoteClient {
    async fn pre_annotate(&self, task: &str, first_frame: usize) -> Result<String, ClientError> {
        let r: RemoteText = self.post("pre_annotate", &RemotePreAnnotate { task, first_frame }).await?;
        Ok(r.text)
    }
}

#[async_trait]
impl VideoOnsetTracker for RemoteClient {
    async fn onset(&self, req: &VideoOnsetRequest) -> Result<usize, ClientError> {
        let r: RemoteOnset = self.post("onset", req).await?;
        Ok(r.frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use demokit_core::episode::mask_bbox_centroid;

    #[tokio::test]
    async fn segment_stub_disc_centroid() {
        let req = SegmentRequest {
            object_id: "cup".into(),
            points: vec![[50.0, 50.0]],
            start_frame: 3,
            end_frame: Some(4),
            radius: Some(10.0),
            mode: None,
        };
        let masks = StubSegmenter.segment(&req, 120, 100).await.unwrap();
        assert_eq!(masks.iter().map(|m| m.frame).collect::<Vec<_>>(), vec![3, 4]);
        let (bbox, c) = mask_bbox_centroid(&masks[0].rle).unwrap();
        assert_eq!((c.x, c.y), (50.0, 50.0));
        assert_eq!(bbox.to_int_array(), [40, 40, 60, 60]);
        // lattice points with x^2 + y^2 <= 100
        assert_eq!(masks[0].rle.foreground_count(), 317);
    }

    #[tokio::test]
    async fn onset_stub_threshold() {
        let mut signal = vec![0.0; 30];
        signal[12..].iter_mut().for_each(|s| *s = 1.0);
        let req = VideoOnsetRequest {
            start_frame: 0,
            end_frame: 29,
            signal,
            threshold: 0.5,
        };
        assert_eq!(StubVideoOnsetTracker.onset(&req).await, Ok(12));
        let flat = VideoOnsetRequest {
            signal: vec![0.0; 30],
            ..req
        };
        assert!(StubVideoOnsetTracker.onset(&flat).await.is_err());
    }

    #[tokio::test]
    async fn pre_annotate_stub_parses_as_plan() {
        let text = StubPreAnnotator.pre_annotate("move the cup to the shelf", 0).await.unwrap();
        assert!(text.starts_with("```json\n[") && text.ends_with("<move the cup to the shelf>"));
        let steps = parse_plan(&text).unwrap();
        let skills: Vec<_> = steps.iter().map(|s| s.skill).collect();
        assert_eq!(skills, vec![PrimitiveSkill::Pick, PrimitiveSkill::MoveWithObject, PrimitiveSkill::Place]);
        assert_eq!(steps[0].text, "pick up the cup");
    }

    #[test]
    fn brace_list_reply_is_accepted() {
        let reply = "```json\n{\n  \"pull the handle of the bottom drawer\",\n  \"pick up the rxbar chocolate in the bottom drawer\"\n}\n```\n<task>";
        let steps = parse_plan(reply).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].skill, PrimitiveSkill::Pull);
        assert!(parse_plan("no fence").is_err());
    }
}
