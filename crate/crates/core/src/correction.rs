//! Spatial and temporal repair of projected trajectories against video.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::{mask_bbox_centroid, Episode};
use crate::geometry::{Pixel, Rect};
use crate::kinematics::gripper_bbox;

/// Offsets smaller than this (pixels) are treated as already aligned.
pub const ALIGNED_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorrectionError {
    #[error("missing annotation: {0}")]
    MissingAnnotation(String),
    #[error("video onset {onset} outside 0..{frames}")]
    OutOfRange { onset: usize, frames: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub iou_threshold: f64,
    pub aspect_limit: f64,
    /// Meters per frame.
    pub speed_threshold: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            aspect_limit: 4.0,
            speed_threshold: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialReason {
    IouAboveThreshold,
    ExtremeAspectRatio,
    /// The trace already passes through the object centroid at contact.
    AlreadyAligned,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialCorrection {
    pub applied: bool,
    pub offset2d: Pixel,
    pub reason: SpatialReason,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalCorrection {
    pub video_onset: usize,
    pub traj_onset: usize,
    pub shift: i64,
    pub padded: usize,
    pub truncated: usize,
    pub static_trajectory: bool,
}

/// Long side over short side of a mask box, counting pixels inclusively.
fn aspect_ratio(b: &Rect) -> f64 {
    let w = b.width() + 1.0;
    let h = b.height() + 1.0;
    w.max(h) / w.min(h)
}

pub fn spatial_correct(
    episode: &Episode,
    iou_threshold: f64,
    aspect_limit: f64,
) -> Result<(Episode, SpatialCorrection), CorrectionError> {
    let missing = |what: &str| CorrectionError::MissingAnnotation(what.to_string());
    let ann = &episode.annotations;
    let contact = ann.contact_frames.first().ok_or_else(|| missing("contact frame"))?;
    let k = contact.frame;
    let mask = ann
        .mask_at(&contact.object_id, k)
        .ok_or_else(|| missing(&format!("mask of {:?} at contact frame {k}", contact.object_id)))?;
    let (object_box, centroid) =
        mask_bbox_centroid(mask).map_err(|_| missing(&format!("non-empty mask of {:?} at frame {k}", contact.object_id)))?;
    let keypoints = ann
        .keypoints2d
        .as_ref()
        .and_then(|kp| kp.get(k))
        .ok_or_else(|| missing("projected keypoints"))?;
    let gripper_box = gripper_bbox(keypoints, episode.camera.width, episode.camera.height)
        .map_err(|_| missing(&format!("gripper box at contact frame {k}")))?;
    let tcp = ann
        .trace2d
        .as_ref()
        .and_then(|t| t.get(k).copied().flatten())
        .ok_or_else(|| missing(&format!("TCP projection at contact frame {k}")))?;

    let iou = gripper_box.iou(&object_box);
    let unchanged = |reason| SpatialCorrection {
        applied: false,
        offset2d: Pixel::default(),
        reason,
        iou,
    };
    if iou > iou_threshold {
        return Ok((episode.clone(), unchanged(SpatialReason::IouAboveThreshold)));
    }
    if aspect_ratio(&object_box) > aspect_limit {
        return Ok((episode.clone(), unchanged(SpatialReason::ExtremeAspectRatio)));
    }
    let offset = Pixel::new(centroid.x - tcp.x, centroid.y - tcp.y);
    if offset.x.abs() < ALIGNED_EPS && offset.y.abs() < ALIGNED_EPS {
        return Ok((episode.clone(), unchanged(SpatialReason::AlreadyAligned)));
    }

    let mut out = episode.clone();
    let a = &mut out.annotations;
    if let Some(trace) = a.trace2d.as_mut() {
        for p in trace.iter_mut().flatten() {
            *p = p.offset(&offset);
        }
    }
    if let Some(kps) = a.keypoints2d.as_mut() {
        for frame in kps.iter_mut() {
            for p in frame.values_mut() {
                *p = p.offset(&offset);
            }
        }
    }
    // derived geometry was computed from the old projection
    a.derived = None;
    Ok((
        out,
        SpatialCorrection {
            applied: true,
            offset2d: offset,
            reason: SpatialReason::Applied,
            iou,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Onset {
    pub frame: usize,
    /// No step exceeded the threshold; `frame` is 0.
    pub static_trajectory: bool,
}

/// First frame `k` whose TCP displacement to frame `k + 1` exceeds the threshold.
pub fn trajectory_onset(episode: &Episode, speed_threshold: f64) -> Onset {
    let f = &episode.frames;
    for k in 0..f.len().saturating_sub(1) {
        if (f[k + 1].tcp_pose.translation - f[k].tcp_pose.translation).norm() > speed_threshold {
            return Onset {
                frame: k,
                static_trajectory: false,
            };
        }
    }
    log::warn!("episode {}: static trajectory, onset defaults to frame 0", episode.episode_id);
    Onset {
        frame: 0,
        static_trajectory: true,
    }
}

fn remap<T: Clone>(src: &[T], shift: i64) -> Vec<T> {
    let n = src.len() as i64;
    (0..n).map(|i| src[(i - shift).clamp(0, n - 1) as usize].clone()).collect()
}

/// Shifts the robot-state streams by `video_onset - traj_onset` frames,
/// repeating boundary records, so frame `i` of the result pairs video frame
/// `i` with trajectory record `i - shift`.
pub fn temporal_correct(
    episode: &Episode,
    video_onset: usize,
    speed_threshold: f64,
) -> Result<(Episode, TemporalCorrection), CorrectionError> {
    let n = episode.frames.len();
    if video_onset >= n {
        return Err(CorrectionError::OutOfRange {
            onset: video_onset,
            frames: n,
        });
    }
    let onset = trajectory_onset(episode, speed_threshold);
    let shift = video_onset as i64 - onset.frame as i64;
    let moved = (shift.unsigned_abs() as usize).min(n);

    let mut out = episode.clone();
    out.frames = remap(&episode.frames, shift)
        .into_iter()
        .zip(&episode.frames)
        .map(|(mut rec, video)| {
            rec.index = video.index;
            rec.timestamp = video.timestamp;
            rec
        })
        .collect();
    let a = &mut out.annotations;
    if let Some(t) = &episode.annotations.trace2d {
        a.trace2d = Some(remap(t, shift));
    }
    if let Some(kp) = &episode.annotations.keypoints2d {
        a.keypoints2d = Some(remap::<BTreeMap<String, Pixel>>(kp, shift));
    }
    if shift != 0 {
        a.derived = None;
    }
    Ok((
        out,
        TemporalCorrection {
            video_onset,
            traj_onset: onset.frame,
            shift,
            padded: moved,
            truncated: moved,
            static_trajectory: onset.static_trajectory,
        },
    ))
}
