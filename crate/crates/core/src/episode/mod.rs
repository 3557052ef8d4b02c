//! Episodes: per-frame robot state, camera, and annotations.
//!
//! An [`Episode`] is an immutable value once validated; edits build a new one.

mod manifest;
mod rle;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{Pixel, Rect, Se3, QUATERNION_NORM_TOL};
use crate::skills::PrimitiveSkill;

pub use manifest::{load_episode, save_episode, Manifest, FRAME_COLUMNS};
pub use rle::{decode_mask, encode_mask, mask_bbox_centroid, BinaryGrid, RleError, RleMask};

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("invariant violated at `{field}`: {message}")]
    Invariant { field: String, message: String },
}

impl EpisodeError {
    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        EpisodeError::Invariant {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSetting {
    InTheWild,
    TableTop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub joint_positions: Vec<f64>,
    /// 0 = closed, 1 = fully open.
    pub gripper_opening: f64,
    /// End-effector pose in the robot base frame.
    pub tcp_pose: Se3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Pose of the robot base expressed in the camera frame.
    pub extrinsics: Se3,
}

impl CameraParams {
    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(EpisodeError::invariant("camera.fx", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(EpisodeError::invariant("camera.width", "image size must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(EpisodeError::invariant("camera.cx", "principal point outside image"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(EpisodeError::invariant("camera.cy", "principal point outside image"));
        }
        check_unit_quaternion("camera.extrinsics", &self.extrinsics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub start_frame: usize,
    pub end_frame: usize,
    pub skill: PrimitiveSkill,
    pub description: String,
    /// Object the clip manipulates, when bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start_frame <= frame && frame <= self.end_frame
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactAnnotation {
    pub frame: usize,
    pub object_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub frame: usize,
    pub rle: RleMask,
}

/// Human review bookkeeping for object masks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewState {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub consecutive_rejects: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub hard_samples: BTreeSet<String>,
}

impl ReviewState {
    pub fn is_empty(&self) -> bool {
        self.consecutive_rejects.is_empty() && self.hard_samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub frame: usize,
    pub object_id: String,
    pub affordance_box: Rect,
    pub contact_points: BTreeMap<String, Pixel>,
    pub grasp_pose: Se3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementProposal {
    pub clip_index: usize,
    pub object_id: String,
    pub rect: Rect,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedAnnotations {
    /// One per contact annotation, in contact order.
    pub grasps: Vec<GraspAnnotation>,
    /// One per clip whose bound object has a mask at the clip's last frame.
    pub placements: Vec<PlacementProposal>,
    /// Per frame; `None` where fewer than two keypoints are visible.
    pub gripper_boxes: Vec<Option<Rect>>,
    /// Per clip, aligned task-level language.
    pub subtask_texts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub global_description: String,
    pub clips: Vec<Clip>,
    pub contact_frames: Vec<ContactAnnotation>,
    pub object_masks: BTreeMap<String, Vec<MaskEntry>>,
    pub review: ReviewState,
    /// Per-frame projection of the TCP; `None` where it falls behind the camera.
    pub trace2d: Option<Vec<Option<Pixel>>>,
    /// Per-frame projected gripper keypoints (visible ones only).
    pub keypoints2d: Option<Vec<BTreeMap<String, Pixel>>>,
    pub derived: Option<DerivedAnnotations>,
}

impl AnnotationSet {
    pub fn mask_at(&self, object_id: &str, frame: usize) -> Option<&RleMask> {
        self.object_masks
            .get(object_id)?
            .iter()
            .find(|m| m.frame == frame)
            .map(|m| &m.rle)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub source_setting: SourceSetting,
    pub robot_id: String,
    pub camera: CameraParams,
    pub frames: Vec<FrameRecord>,
    pub annotations: AnnotationSet,
    pub video_uri: Option<String>,
}

fn check_unit_quaternion(field: &str, pose: &Se3) -> Result<(), EpisodeError> {
    let norm = pose.rotation.quaternion().norm();
    if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
        return Err(EpisodeError::invariant(
            field,
            format!("quaternion norm {norm} not within {QUATERNION_NORM_TOL} of 1"),
        ));
    }
    Ok(())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.')
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Reference to the image of frame `k`, relative to the data root.
    pub fn frame_ref(&self, k: usize) -> String {
        let base = self.video_uri.as_deref().unwrap_or(&self.episode_id);
        format!("{base}/{k:06}.png")
    }

    /// Clip containing `frame`; on a shared boundary the later clip wins.
    pub fn clip_at(&self, frame: usize) -> Option<(usize, &Clip)> {
        self.annotations
            .clips
            .iter()
            .enumerate()
            .rev()
            .find(|(_, c)| c.contains(frame))
    }

    /// Checks every invariant of the data model, reporting the first failure
    /// with its field path.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if !valid_id(&self.episode_id) {
            return Err(EpisodeError::invariant(
                "episode_id",
                "must be non-empty and use only [A-Za-z0-9_.-]",
            ));
        }
        self.camera.validate()?;
        let n = self.frames.len();
        if n == 0 {
            return Err(EpisodeError::invariant("frames", "episode has no frames"));
        }
        let dof = self.frames[0].joint_positions.len();
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(EpisodeError::invariant(
                    format!("frames[{i}].index"),
                    format!("expected contiguous index {i}, found {}", f.index),
                ));
            }
            if i > 0 && !(f.timestamp > self.frames[i - 1].timestamp) {
                return Err(EpisodeError::invariant(
                    format!("frames[{i}].timestamp"),
                    "timestamps must be strictly increasing",
                ));
            }
            if f.joint_positions.len() != dof {
                return Err(EpisodeError::invariant(
                    format!("frames[{i}].joint_positions"),
                    "joint count differs between frames",
                ));
            }
            if !(0.0..=1.0).contains(&f.gripper_opening) {
                return Err(EpisodeError::invariant(
                    format!("frames[{i}].gripper_opening"),
                    "must lie in [0, 1]",
                ));
            }
            check_unit_quaternion(&format!("frames[{i}].tcp_pose"), &f.tcp_pose)?;
        }
        self.validate_annotations()
    }

    fn validate_annotations(&self) -> Result<(), EpisodeError> {
        let n = self.frames.len();
        let ann = &self.annotations;
        let in_range = |field: String, frame: usize| {
            if frame < n {
                Ok(())
            } else {
                Err(EpisodeError::invariant(
                    field,
                    format!("frame {frame} out of range for {n} frames"),
                ))
            }
        };

        for (k, c) in ann.clips.iter().enumerate() {
            in_range(format!("annotations.clips[{k}].start_frame"), c.start_frame)?;
            in_range(format!("annotations.clips[{k}].end_frame"), c.end_frame)?;
            if c.start_frame >= c.end_frame {
                return Err(EpisodeError::invariant(
                    format!("annotations.clips[{k}]"),
                    "start_frame must be before end_frame",
                ));
            }
            if k > 0 {
                let prev = &ann.clips[k - 1];
                if c.start_frame < prev.end_frame {
                    return Err(EpisodeError::invariant(
                        format!("annotations.clips[{k}]"),
                        "clips must be ordered and may only share a boundary frame",
                    ));
                }
            }
            if let Some(obj) = &c.object_id {
                if !ann.object_masks.contains_key(obj) {
                    return Err(EpisodeError::invariant(
                        format!("annotations.clips[{k}].object_id"),
                        format!("unknown object {obj:?}"),
                    ));
                }
            }
        }

        for (k, c) in ann.contact_frames.iter().enumerate() {
            in_range(format!("annotations.contact_frames[{k}].frame"), c.frame)?;
            if !ann.object_masks.contains_key(&c.object_id) {
                return Err(EpisodeError::invariant(
                    format!("annotations.contact_frames[{k}].object_id"),
                    format!("unknown object {:?}", c.object_id),
                ));
            }
        }

        for (obj, entries) in &ann.object_masks {
            for (k, m) in entries.iter().enumerate() {
                let field = format!("annotations.masks.{obj}[{k}]");
                in_range(field.clone(), m.frame)?;
                m.rle
                    .validate()
                    .map_err(|e| EpisodeError::invariant(field.clone(), e.to_string()))?;
                if m.rle.width != self.camera.width || m.rle.height != self.camera.height {
                    return Err(EpisodeError::invariant(field, "mask size differs from camera image size"));
                }
                if k > 0 && entries[k - 1].frame >= m.frame {
                    return Err(EpisodeError::invariant(
                        format!("annotations.masks.{obj}"),
                        "mask entries must be sorted by strictly increasing frame",
                    ));
                }
            }
        }

        if let Some(t) = &ann.trace2d {
            if t.len() != n {
                return Err(EpisodeError::invariant("trace2d", format!("expected {n} entries, found {}", t.len())));
            }
        }
        if let Some(kp) = &ann.keypoints2d {
            if kp.len() != n {
                return Err(EpisodeError::invariant(
                    "keypoints2d",
                    format!("expected {n} entries, found {}", kp.len()),
                ));
            }
        }
        if let Some(d) = &ann.derived {
            if !d.gripper_boxes.is_empty() && d.gripper_boxes.len() != n {
                return Err(EpisodeError::invariant("derived.gripper_boxes", "one entry per frame expected"));
            }
            for (k, g) in d.grasps.iter().enumerate() {
                in_range(format!("derived.grasps[{k}].frame"), g.frame)?;
                check_unit_quaternion(&format!("derived.grasps[{k}].grasp_pose"), &g.grasp_pose)?;
                self.check_in_image(&format!("derived.grasps[{k}].affordance_box"), &g.affordance_box)?;
            }
            for (k, p) in d.placements.iter().enumerate() {
                if p.clip_index >= ann.clips.len() {
                    return Err(EpisodeError::invariant(format!("derived.placements[{k}].clip_index"), "no such clip"));
                }
                self.check_in_image(&format!("derived.placements[{k}].rect"), &p.rect)?;
            }
            for (k, b) in d.gripper_boxes.iter().enumerate() {
                if let Some(b) = b {
                    self.check_in_image(&format!("derived.gripper_boxes[{k}]"), b)?;
                }
            }
        }
        Ok(())
    }

    fn check_in_image(&self, field: &str, r: &Rect) -> Result<(), EpisodeError> {
        let (w, h) = ((self.camera.width - 1) as f64, (self.camera.height - 1) as f64);
        let ok = r.validate().is_ok() && r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= w && r.y2 <= h;
        if ok {
            Ok(())
        } else {
            Err(EpisodeError::invariant(field, "rectangle outside image bounds"))
        }
    }
}

/// Small valid episodes for tests in this and downstream crates.
pub mod fixtures {
    use super::*;
    use crate::episode::rle::encode_mask;

    pub fn tiny_episode(num_frames: usize) -> Episode {
        let camera = CameraParams {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
            extrinsics: Se3::identity(),
        };
        let frames = (0..num_frames)
            .map(|i| FrameRecord {
                index: i,
                timestamp: i as f64 * 0.1,
                joint_positions: vec![0.1 * i as f64, -0.2],
                gripper_opening: 0.5,
                tcp_pose: Se3::from_translation(nalgebra::Vector3::new(0.01 * i as f64, 0.0, 1.0)),
            })
            .collect();
        let mut grid = BinaryGrid::new(64, 48);
        for y in 10..20 {
            for x in 20..30 {
                grid.set(x, y, true);
            }
        }
        let mut masks = BTreeMap::new();
        masks.insert(
            "cup".to_string(),
            vec![MaskEntry {
                frame: 1,
                rle: encode_mask(&grid).unwrap(),
            }],
        );
        Episode {
            episode_id: "tiny_000".into(),
            source_setting: SourceSetting::TableTop,
            robot_id: "planar2".into(),
            camera,
            frames,
            annotations: AnnotationSet {
                global_description: "pick up the cup".into(),
                clips: vec![Clip {
                    start_frame: 0,
                    end_frame: num_frames - 1,
                    skill: PrimitiveSkill::Pick,
                    description: "pick up the cup on the table".into(),
                    object_id: Some("cup".into()),
                }],
                contact_frames: vec![ContactAnnotation {
                    frame: 1,
                    object_id: "cup".into(),
                }],
                object_masks: masks,
                ..Default::default()
            },
            video_uri: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::tiny_episode;
    use super::*;

    fn field_of(err: EpisodeError) -> String {
        match err {
            EpisodeError::Invariant { field, .. } => field,
            other => panic!("expected invariant error, got {other}"),
        }
    }

    #[test]
    fn fixture_is_valid() {
        tiny_episode(3).validate().unwrap();
    }

    #[test]
    fn clip_past_end_is_rejected() {
        let mut e = tiny_episode(5);
        e.annotations.clips[0].end_frame = 10;
        assert_eq!(field_of(e.validate().unwrap_err()), "annotations.clips[0].end_frame");
    }

    #[test]
    fn overlapping_clips_rejected_but_shared_boundary_allowed() {
        let mut e = tiny_episode(10);
        e.annotations.clips = vec![
            Clip {
                start_frame: 0,
                end_frame: 5,
                skill: PrimitiveSkill::Pick,
                description: "a".into(),
                object_id: None,
            },
            Clip {
                start_frame: 5,
                end_frame: 9,
                skill: PrimitiveSkill::Place,
                description: "b".into(),
                object_id: None,
            },
        ];
        e.validate().unwrap();
        e.annotations.clips[1].start_frame = 4;
        assert_eq!(field_of(e.validate().unwrap_err()), "annotations.clips[1]");
    }

    #[test]
    fn non_contiguous_frames_rejected() {
        let mut e = tiny_episode(3);
        e.frames[2].index = 5;
        assert_eq!(field_of(e.validate().unwrap_err()), "frames[2].index");
    }

    #[test]
    fn contact_with_unknown_object_rejected() {
        let mut e = tiny_episode(3);
        e.annotations.contact_frames[0].object_id = "ghost".into();
        assert_eq!(field_of(e.validate().unwrap_err()), "annotations.contact_frames[0].object_id");
    }

    #[test]
    fn clip_at_prefers_later_clip_on_boundary() {
        let mut e = tiny_episode(10);
        e.annotations.clips.push(Clip {
            start_frame: 9,
            end_frame: 9,
            skill: PrimitiveSkill::Place,
            description: "x".into(),
            object_id: None,
        });
        assert_eq!(e.clip_at(9).unwrap().0, 1);
        assert_eq!(e.clip_at(3).unwrap().0, 0);
    }
}
