//! Intermediate representations derived from projected keypoints, masks and
//! clips: grasp affordances, placement proposals, gripper boxes and
//! task-level clip language.

pub mod fcot;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::episode::{mask_bbox_centroid, Clip, ContactAnnotation, DerivedAnnotations, Episode, GraspAnnotation, PlacementProposal};
use crate::geometry::{Pixel, Rect};
use crate::kinematics::{gripper_bbox, project_keypoints, project_tcp, KinematicsError, RobotModel};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DeriveError {
    #[error("episode has no contact annotation")]
    MissingContact,
    #[error("no usable mask: {0}")]
    MissingMask(String),
    #[error("projected keypoints missing at frame {0}")]
    MissingProjection(usize),
    #[error("no primitive clip overlaps [{start}, {end}] above the threshold")]
    NoOverlap { start: usize, end: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeriveConfig {
    /// Affordance box growth per side, as a fraction of the box size.
    pub affordance_margin: f64,
    pub overlap_threshold: f64,
}

impl Default for DeriveConfig {
    fn default() -> Self {
        Self {
            affordance_margin: 0.1,
            overlap_threshold: 0.5,
        }
    }
}

/// Fills `trace2d` and `keypoints2d` by projecting every frame.
pub fn project_episode(episode: &Episode, model: &RobotModel, ee_offset: &Vector3<f64>) -> Result<Episode, KinematicsError> {
    let mut trace = Vec::with_capacity(episode.frames.len());
    let mut kps = Vec::with_capacity(episode.frames.len());
    for f in &episode.frames {
        trace.push(match project_tcp(&episode.camera, f, ee_offset) {
            Ok(p) => Some(p),
            Err(KinematicsError::BehindCamera { .. }) => None,
            Err(e) => return Err(e),
        });
        kps.push(project_keypoints(model, &episode.camera, f, ee_offset)?.pixels);
    }
    let mut out = episode.clone();
    out.annotations.trace2d = Some(trace);
    out.annotations.keypoints2d = Some(kps);
    Ok(out)
}

fn keypoints_at(episode: &Episode, frame: usize) -> Result<&BTreeMap<String, Pixel>, DeriveError> {
    episode
        .annotations
        .keypoints2d
        .as_ref()
        .and_then(|k| k.get(frame))
        .ok_or(DeriveError::MissingProjection(frame))
}

pub fn derive_grasp_for(episode: &Episode, contact: &ContactAnnotation, margin: f64) -> Result<GraspAnnotation, DeriveError> {
    let (w, h) = (episode.camera.width, episode.camera.height);
    let kps = keypoints_at(episode, contact.frame)?;
    let tight = gripper_bbox(kps, w, h)?;
    Ok(GraspAnnotation {
        frame: contact.frame,
        object_id: contact.object_id.clone(),
        affordance_box: tight.expand(margin).clamp_to_image(w, h),
        contact_points: kps.clone(),
        grasp_pose: episode.frames[contact.frame].tcp_pose,
    })
}

/// Grasp at the first annotated contact.
pub fn derive_grasp(episode: &Episode, margin: f64) -> Result<GraspAnnotation, DeriveError> {
    let contact = episode.annotations.contact_frames.first().ok_or(DeriveError::MissingContact)?;
    derive_grasp_for(episode, contact, margin)
}

/// Object box at the clip's last frame.
pub fn derive_placement(episode: &Episode, clip: &Clip) -> Result<Rect, DeriveError> {
    let obj = clip
        .object_id
        .as_deref()
        .ok_or_else(|| DeriveError::MissingMask("clip has no bound object".into()))?;
    let mask = episode
        .annotations
        .mask_at(obj, clip.end_frame)
        .ok_or_else(|| DeriveError::MissingMask(format!("{obj:?} at frame {}", clip.end_frame)))?;
    mask_bbox_centroid(mask)
        .map(|(b, _)| b)
        .map_err(|_| DeriveError::MissingMask(format!("{obj:?} at frame {} is empty", clip.end_frame)))
}

/// One box per frame over the projected keypoints; `None` with fewer than two.
pub fn derive_gripper_boxes(episode: &Episode) -> Result<Vec<Option<Rect>>, DeriveError> {
    let kps = episode
        .annotations
        .keypoints2d
        .as_ref()
        .ok_or(DeriveError::MissingProjection(0))?;
    Ok(kps
        .iter()
        .map(|k| gripper_bbox(k, episode.camera.width, episode.camera.height).ok())
        .collect())
}

fn lowercase_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Task-level text for a semantic interval: descriptions of the primitive
/// clips whose overlap with `[start, end]`, relative to the clip's own
/// length, exceeds `threshold`.
pub fn align_clip_language(episode: &Episode, span: (usize, usize), threshold: f64) -> Result<String, DeriveError> {
    let clips = &episode.annotations.clips;
    if clips.len() == 1 {
        return Ok(episode.annotations.global_description.clone());
    }
    let (start, end) = span;
    let mut ordered: Vec<&Clip> = clips.iter().collect();
    ordered.sort_by_key(|c| c.start_frame);
    let parts: Vec<&str> = ordered
        .into_iter()
        .filter(|c| {
            let inter = end.min(c.end_frame) as f64 - start.max(c.start_frame) as f64;
            inter.max(0.0) / c.len() as f64 > threshold
        })
        .map(|c| c.description.as_str())
        .collect();
    let Some((first, rest)) = parts.split_first() else {
        return Err(DeriveError::NoOverlap { start, end });
    };
    let mut text = first.to_string();
    for p in rest {
        text.push_str(", then ");
        text.push_str(&lowercase_first(p));
    }
    Ok(text)
}

/// Computes the full derived block for an episode that has projections.
pub fn derive_all(episode: &Episode, config: &DeriveConfig) -> Result<DerivedAnnotations, DeriveError> {
    let ann = &episode.annotations;
    let grasps = ann
        .contact_frames
        .iter()
        .map(|c| derive_grasp_for(episode, c, config.affordance_margin))
        .collect::<Result<_, _>>()?;
    let placements = ann
        .clips
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            derive_placement(episode, c).ok().map(|rect| PlacementProposal {
                clip_index: i,
                object_id: c.object_id.clone().expect("placement needs a bound object"),
                rect,
            })
        })
        .collect();
    let subtask_texts = ann
        .clips
        .iter()
        .map(|c| align_clip_language(episode, (c.start_frame, c.end_frame), config.overlap_threshold))
        .collect::<Result<_, _>>()?;
    Ok(DerivedAnnotations {
        grasps,
        placements,
        gripper_boxes: derive_gripper_boxes(episode)?,
        subtask_texts,
    })
}

/// Returns the episode with its derived block replaced.
pub fn with_derived(episode: &Episode, config: &DeriveConfig) -> Result<Episode, DeriveError> {
    let mut out = episode.clone();
    out.annotations.derived = Some(derive_all(episode, config)?);
    Ok(out)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::episode::fixtures::tiny_episode;

    /// `tiny_episode` with a 2-point keypoint projection on every frame.
    pub fn projected_episode(n: usize) -> Episode {
        let mut e = tiny_episode(n);
        let kp: BTreeMap<String, Pixel> = [("kp_a", (10.0, 10.0)), ("kp_b", (20.0, 30.0))]
            .into_iter()
            .map(|(k, (x, y))| (k.to_string(), Pixel::new(x, y)))
            .collect();
        e.annotations.keypoints2d = Some(vec![kp; n]);
        e.annotations.trace2d = Some((0..n).map(|i| Some(Pixel::new(15.0 + i as f64, 20.0))).collect());
        e
    }
}
