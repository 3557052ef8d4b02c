//! JSON manifest + binary frame sidecar.
//!
//! The manifest holds everything human-diffable. Per-frame numeric state
//! lives in a sidecar of little-endian `f64` rows, one row per frame:
//!
//! `index, timestamp, gripper_opening, tx, ty, tz, qw, qx, qy, qz, joint_0, ..., joint_{n-1}`
//!
//! Manifests are written with sorted keys and shortest round-trip floats so
//! that saving an unchanged episode is byte-stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AnnotationSet, CameraParams, Clip, ContactAnnotation, DerivedAnnotations, Episode, EpisodeError,
    FrameRecord, MaskEntry, ReviewState, SourceSetting,
};
use crate::geometry::{GeometryError, Pixel, PoseRecord, Se3};

/// Number of fixed columns preceding the joint positions in a sidecar row.
pub const FRAME_COLUMNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsics: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestAnnotations {
    pub global_description: String,
    pub clips: Vec<Clip>,
    pub contact_frames: Vec<ContactAnnotation>,
    pub masks: BTreeMap<String, Vec<MaskEntry>>,
    #[serde(default, skip_serializing_if = "ReviewState::is_empty")]
    pub review: ReviewState,
}

/// Serialized form of an [`Episode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub episode_id: String,
    pub source_setting: SourceSetting,
    pub robot_id: String,
    pub camera: CameraRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_uri: Option<String>,
    pub frames_file: String,
    pub num_frames: usize,
    pub annotations: ManifestAnnotations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace2d: Option<Vec<Option<Pixel>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<Vec<BTreeMap<String, Pixel>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<DerivedAnnotations>,
}

impl Manifest {
    pub fn sidecar_name(episode_id: &str) -> String {
        format!("{episode_id}.frames.bin")
    }

    pub fn from_episode(e: &Episode) -> Manifest {
        let a = &e.annotations;
        Manifest {
            episode_id: e.episode_id.clone(),
            source_setting: e.source_setting,
            robot_id: e.robot_id.clone(),
            camera: CameraRecord {
                fx: e.camera.fx,
                fy: e.camera.fy,
                cx: e.camera.cx,
                cy: e.camera.cy,
                width: e.camera.width,
                height: e.camera.height,
                extrinsics: PoseRecord::from(&e.camera.extrinsics),
            },
            video_uri: e.video_uri.clone(),
            frames_file: Self::sidecar_name(&e.episode_id),
            num_frames: e.frames.len(),
            annotations: ManifestAnnotations {
                global_description: a.global_description.clone(),
                clips: a.clips.clone(),
                contact_frames: a.contact_frames.clone(),
                masks: a.object_masks.clone(),
                review: a.review.clone(),
            },
            trace2d: a.trace2d.clone(),
            keypoints2d: a.keypoints2d.clone(),
            derived: a.derived.clone(),
        }
    }

    /// Canonical JSON text: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest is always representable as JSON");
        let mut s = serde_json::to_string_pretty(&value).expect("JSON value serializes");
        s.push('\n');
        s
    }

    /// Rebuilds an episode from the manifest and decoded frame rows.
    pub fn into_episode(self, frames: Vec<FrameRecord>) -> Result<Episode, EpisodeError> {
        let ext = self.camera.extrinsics;
        let extrinsics = Se3::from_parts(ext.t, ext.q)
            .map_err(|e| EpisodeError::invariant("camera.extrinsics", e.to_string()))?;
        let ep = Episode {
            episode_id: self.episode_id,
            source_setting: self.source_setting,
            robot_id: self.robot_id,
            camera: CameraParams {
                fx: self.camera.fx,
                fy: self.camera.fy,
                cx: self.camera.cx,
                cy: self.camera.cy,
                width: self.camera.width,
                height: self.camera.height,
                extrinsics,
            },
            frames,
            annotations: AnnotationSet {
                global_description: self.annotations.global_description,
                clips: self.annotations.clips,
                contact_frames: self.annotations.contact_frames,
                object_masks: self.annotations.masks,
                review: self.annotations.review,
                trace2d: self.trace2d,
                keypoints2d: self.keypoints2d,
                derived: self.derived,
            },
            video_uri: self.video_uri,
        };
        Ok(ep)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EpisodeError + '_ {
    move |source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encodes frames as sidecar bytes.
pub fn encode_frames(frames: &[FrameRecord]) -> Vec<u8> {
    let dof = frames.first().map_or(0, |f| f.joint_positions.len());
    let mut out = Vec::with_capacity(frames.len() * (FRAME_COLUMNS + dof) * 8);
    for f in frames {
        let t = f.tcp_pose.translation_array();
        let q = f.tcp_pose.quaternion_wxyz();
        let head = [
            f.index as f64,
            f.timestamp,
            f.gripper_opening,
            t[0],
            t[1],
            t[2],
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in head.iter().chain(f.joint_positions.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes sidecar bytes into frames, checking shape and pose invariants.
pub fn decode_frames(bytes: &[u8], num_frames: usize) -> Result<Vec<FrameRecord>, EpisodeError> {
    let schema = |message: String| EpisodeError::Schema {
        field: "frames_file".into(),
        message,
    };
    if num_frames == 0 {
        return Err(EpisodeError::invariant("frames", "episode has no frames"));
    }
    if bytes.len() % 8 != 0 || (bytes.len() / 8) % num_frames != 0 {
        return Err(schema(format!(
            "{} bytes do not form {num_frames} rows of f64",
            bytes.len()
        )));
    }
    let width = bytes.len() / 8 / num_frames;
    if width < FRAME_COLUMNS {
        return Err(schema(format!("row width {width} below the {FRAME_COLUMNS} fixed columns")));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    values
        .chunks_exact(width)
        .enumerate()
        .map(|(i, row)| {
            let index = row[0];
            if !(index >= 0.0 && index.fract() == 0.0) {
                return Err(EpisodeError::invariant(
                    format!("frames[{i}].index"),
                    format!("not a frame index: {index}"),
                ));
            }
            let tcp_pose = Se3::from_parts([row[3], row[4], row[5]], [row[6], row[7], row[8], row[9]])
                .map_err(|e| match e {
                    GeometryError::NonUnitQuaternion { .. } | GeometryError::NonFinite => {
                        EpisodeError::invariant(format!("frames[{i}].tcp_pose"), e.to_string())
                    }
                    other => EpisodeError::invariant(format!("frames[{i}]"), other.to_string()),
                })?;
            Ok(FrameRecord {
                index: index as usize,
                timestamp: row[1],
                gripper_opening: row[2],
                tcp_pose,
                joint_positions: row[FRAME_COLUMNS..].to_vec(),
            })
        })
        .collect()
}

/// Loads and validates an episode manifest plus its frame sidecar.
pub fn load_episode(manifest_path: impl AsRef<Path>) -> Result<Episode, EpisodeError> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| EpisodeError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let manifest: Manifest = serde_path_to_error::deserialize(value).map_err(|e| EpisodeError::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let sidecar: PathBuf = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.frames_file);
    let bytes = fs::read(&sidecar).map_err(io_err(&sidecar))?;
    let frames = decode_frames(&bytes, manifest.num_frames)?;
    let episode = manifest.into_episode(frames)?;
    episode.validate()?;
    Ok(episode)
}

/// Writes `path` (the manifest) and its sidecar next to it.
pub fn save_episode(episode: &Episode, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
    let path = path.as_ref();
    episode.validate()?;
    let manifest = Manifest::from_episode(episode);
    let sidecar = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.frames_file);
    fs::write(&sidecar, encode_frames(&episode.frames)).map_err(io_err(&sidecar))?;
    fs::write(path, manifest.to_canonical_json()).map_err(io_err(path))?;
    Ok(())
}
