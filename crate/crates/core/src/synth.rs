//! Synthetic episodes with known ground truth: end-effector offset, state
//! lag and annotation shifts are planted so downstream stages can be
//! checked for exact recovery.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::CalibrationSample;
use crate::episode::{encode_mask, AnnotationSet, BinaryGrid, CameraParams, Clip, ContactAnnotation, Episode, FrameRecord, MaskEntry, SourceSetting};
use crate::geometry::{Pixel, Rect, Se3};
use crate::kinematics::{project_keypoints, project_tcp, KinematicsError, RobotModel, RobotRegistry};
use crate::skills::PrimitiveSkill;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("no visible trajectory found for {0}")]
    Unreachable(String),
    #[error("bad synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub robot: String,
    pub num_frames: usize,
    pub num_clips: usize,
    /// First video frame with motion.
    pub motion_onset: usize,
    pub ee_offset: [f64; 3],
    /// Recorded state at video frame `i` is the true state at `i - lag`.
    pub lag: i64,
    /// Added to every mask of the manipulated object, pixels.
    pub mask_shift: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            robot: "planar2".into(),
            num_frames: 60,
            num_clips: 4,
            motion_onset: 10,
            ee_offset: [0.0; 3],
            lag: 0,
            mask_shift: [0.0; 2],
            width: 320,
            height: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub ee_offset: [f64; 3],
    pub lag: i64,
    pub video_onset: usize,
    pub contact_frame: usize,
    /// Unlagged robot state per video frame.
    pub true_frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEpisode {
    pub episode: Episode,
    pub truth: SynthTruth,
}

const OBJECTS: [&str; 6] = ["cup", "bowl", "sponge", "apple", "marker", "block"];
const PLACES: [&str; 5] = ["the table", "the shelf", "the tray", "the basket", "the drawer"];
const SKILL_CYCLE: [PrimitiveSkill; 8] = [
    PrimitiveSkill::Pick,
    PrimitiveSkill::MoveWithObject,
    PrimitiveSkill::Place,
    PrimitiveSkill::Push,
    PrimitiveSkill::Pull,
    PrimitiveSkill::Press,
    PrimitiveSkill::Slide,
    PrimitiveSkill::Twist,
];
const OBJECT_MIN_HALF: f64 = 6.0;
/// Clearance kept between the TCP and the image border, pixels.
const BORDER: f64 = 24.0;
/// Per-frame TCP motion while moving, as a multiple of the onset detector's
/// default threshold, so onsets are detected on the first moving frame.
const MIN_STEP: f64 = 0.004;
const MAX_TRIES: usize = 400;

/// Camera rotation whose optical axis points from `eye` to `target`, image
/// y pointing away from `up`. Returns the base pose in the camera frame.
fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Se3 {
    let z = (target - eye).normalize();
    let y = (-up + z * up.dot(&z)).normalize();
    let x = y.cross(&z);
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let cam_in_base = Se3 {
        rotation: UnitQuaternion::from_rotation_matrix(&r),
        translation: eye,
    };
    cam_in_base.inverse()
}

pub fn camera_for(robot: &str, width: u32, height: u32) -> CameraParams {
    let f = width as f64 * 0.9;
    let extrinsics = match robot {
        "arm6" => look_at(Vector3::new(1.5, 0.4, 1.0), Vector3::new(0.3, 0.0, 0.45), Vector3::z()),
        _ => Se3::from_translation(Vector3::new(-0.4, 0.0, 1.5)),
    };
    CameraParams {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        extrinsics,
    }
}

fn start_and_step(robot: &str, rng: &mut impl Rng) -> (Vec<f64>, Vec<(f64, f64)>) {
    match robot {
        "arm6" => (
            vec![
                rng.random_range(-0.4..0.4),
                rng.random_range(0.2..0.5),
                rng.random_range(0.6..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.3..0.8),
                rng.random_range(-0.5..0.5),
            ],
            vec![(0.15, 0.35); 6],
        ),
        _ => (vec![rng.random_range(-0.5..0.5), rng.random_range(0.6..1.4)], vec![(0.3, 0.6); 2]),
    }
}

fn waypoints(robot: &str, clips: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let (q0, steps) = start_and_step(robot, rng);
    let mut out = vec![q0];
    for _ in 0..clips {
        let prev = out.last().unwrap();
        let next = prev
            .iter()
            .zip(&steps)
            .map(|(q, (lo, hi))| q + rng.random_range(*lo..*hi) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        out.push(next);
    }
    out
}

/// Clip boundaries `[b_0, ..., b_K]` spanning the moving part of the video.
fn boundaries(cfg: &SynthConfig) -> Vec<usize> {
    let span = cfg.num_frames - 1 - cfg.motion_onset;
    (0..=cfg.num_clips)
        .map(|k| cfg.motion_onset + (k * span + cfg.num_clips / 2) / cfg.num_clips)
        .collect()
}

fn joints_at(frame: usize, bounds: &[usize], wps: &[Vec<f64>]) -> Vec<f64> {
    if frame <= bounds[0] {
        return wps[0].clone();
    }
    let k = (0..bounds.len() - 1).rfind(|&k| bounds[k] <= frame).unwrap().min(wps.len() - 2);
    let (a, b) = (bounds[k], bounds[k + 1]);
    let s = ((frame - a) as f64 / (b - a) as f64).min(1.0);
    wps[k].iter().zip(&wps[k + 1]).map(|(p, q)| p + s * (q - p)).collect()
}

fn frame_record(model: &RobotModel, index: usize, q: Vec<f64>, opening: f64) -> Result<FrameRecord, SynthError> {
    let ee = model
        .ee_link
        .as_deref()
        .ok_or_else(|| SynthError::Config(format!("robot {} has no end-effector link", model.name)))?;
    let poses = model.forward_kinematics(&q, opening)?;
    Ok(FrameRecord {
        index,
        timestamp: index as f64 * 0.1,
        joint_positions: q,
        gripper_opening: opening,
        tcp_pose: poses[ee],
    })
}

fn in_image(p: &Pixel, camera: &CameraParams, margin: f64) -> bool {
    p.x >= margin && p.y >= margin && p.x < camera.width as f64 - margin && p.y < camera.height as f64 - margin
}

/// True state per video frame, retried until every keypoint and the TCP
/// stay inside the image and each moving frame moves the TCP enough.
fn visible_trajectory(
    model: &RobotModel,
    camera: &CameraParams,
    cfg: &SynthConfig,
    contact: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FrameRecord>, SynthError> {
    let bounds = boundaries(cfg);
    let offset = Vector3::from(cfg.ee_offset);
    'retry: for _ in 0..MAX_TRIES {
        let wps = waypoints(&cfg.robot, cfg.num_clips, rng);
        let mut frames = Vec::with_capacity(cfg.num_frames);
        for i in 0..cfg.num_frames {
            let opening = if i < contact { 1.0 } else { 0.0 };
            let rec = frame_record(model, i, joints_at(i, &bounds, &wps), opening)?;
            let kp = project_keypoints(model, camera, &rec, &offset)?;
            if !kp.invisible.is_empty() || !kp.pixels.values().all(|p| in_image(p, camera, 2.0)) {
                continue 'retry;
            }
            match project_tcp(camera, &rec, &offset) {
                Ok(p) if in_image(&p, camera, BORDER) => {}
                _ => continue 'retry,
            }
            if i > cfg.motion_onset {
                let prev: &FrameRecord = frames.last().unwrap();
                if (rec.tcp_pose.translation - prev.tcp_pose.translation).norm() < MIN_STEP {
                    continue 'retry;
                }
            }
            frames.push(rec);
        }
        return Ok(frames);
    }
    Err(SynthError::Unreachable(cfg.robot.clone()))
}

fn box_mask(center: Pixel, half: (f64, f64), width: u32, height: u32) -> BinaryGrid {
    let mut g = BinaryGrid::new(width, height);
    let r = Rect::new(center.x - half.0, center.y - half.1, center.x + half.0, center.y + half.1).clamp_to_image(width, height);
    let [x1, y1, x2, y2] = r.to_int_array();
    for y in y1..=y2 {
        for x in x1..=x2 {
            g.set(x as u32, y as u32, true);
        }
    }
    g
}

/// One synthetic episode. `rng` drives object choice and the trajectory.
pub fn synth_episode(id: &str, cfg: &SynthConfig, model: &RobotModel, rng: &mut impl Rng) -> Result<SynthEpisode, SynthError> {
    if cfg.num_clips < 1 || cfg.motion_onset + 2 * cfg.num_clips >= cfg.num_frames {
        return Err(SynthError::Config("too few frames for the requested clips".into()));
    }
    if cfg.lag.unsigned_abs() as usize > cfg.motion_onset {
        return Err(SynthError::Config("lag exceeds the static prefix".into()));
    }
    let camera = camera_for(&cfg.robot, cfg.width, cfg.height);
    let bounds = boundaries(cfg);
    let contact = bounds[1];
    let truth_frames = visible_trajectory(model, &camera, cfg, contact, rng)?;
    let n = cfg.num_frames as i64;
    let frames: Vec<FrameRecord> = (0..n)
        .map(|i| {
            let src = &truth_frames[(i - cfg.lag).clamp(0, n - 1) as usize];
            FrameRecord {
                index: i as usize,
                timestamp: i as f64 * 0.1,
                ..src.clone()
            }
        })
        .collect();

    let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
    let other = OBJECTS.iter().copied().filter(|o| *o != object).nth(rng.random_range(0..OBJECTS.len() - 1)).unwrap();
    let from = PLACES[rng.random_range(0..PLACES.len())];
    let to = PLACES.iter().copied().filter(|p| *p != from).nth(rng.random_range(0..PLACES.len() - 1)).unwrap();

    let offset = Vector3::from(cfg.ee_offset);
    let tcp_px = |i: usize| project_tcp(&camera, &truth_frames[i], &offset);
    let shift = Pixel::new(cfg.mask_shift[0], cfg.mask_shift[1]);
    let place_end = bounds[3.min(cfg.num_clips)];
    // the object hugs the gripper at contact, so an unshifted mask passes the IoU gate
    let grip = project_keypoints(model, &camera, &truth_frames[contact], &offset)?;
    let grip_box = Rect::bounding(grip.pixels.values().copied()).ok_or_else(|| SynthError::Unreachable(cfg.robot.clone()))?;
    let half = (
        (grip_box.width() * 0.65).max(OBJECT_MIN_HALF),
        (grip_box.height() * 0.65).max(OBJECT_MIN_HALF),
    );
    let anchor = grip_box.center();
    let tcp_contact = tcp_px(contact)?;
    let object_at = |i: usize| -> Result<Pixel, SynthError> {
        let p = tcp_px(i.clamp(contact, place_end))?;
        Ok(Pixel::new(p.x + anchor.x - tcp_contact.x + shift.x, p.y + anchor.y - tcp_contact.y + shift.y))
    };
    let mut mask_frames: Vec<usize> = std::iter::once(0).chain(bounds[1..].iter().copied()).collect();
    mask_frames.sort_unstable();
    mask_frames.dedup();
    let mut object_masks = BTreeMap::new();
    let mut entries = Vec::new();
    for &f in &mask_frames {
        let grid = box_mask(object_at(f)?, half, cfg.width, cfg.height);
        entries.push(MaskEntry {
            frame: f,
            rle: encode_mask(&grid).expect("synthetic mask encodes"),
        });
    }
    object_masks.insert(object.to_string(), entries);
    let home = object_at(0)?;
    let other_center = Pixel::new(
        if home.x < cfg.width as f64 / 2.0 { cfg.width as f64 * 0.85 } else { cfg.width as f64 * 0.15 },
        if home.y < cfg.height as f64 / 2.0 { cfg.height as f64 * 0.8 } else { cfg.height as f64 * 0.2 },
    );
    let other_grid = box_mask(other_center, (OBJECT_MIN_HALF, OBJECT_MIN_HALF), cfg.width, cfg.height);
    let other_rle = encode_mask(&other_grid).expect("synthetic mask encodes");
    object_masks.insert(
        other.to_string(),
        [0, contact]
            .iter()
            .map(|&frame| MaskEntry {
                frame,
                rle: other_rle.clone(),
            })
            .collect(),
    );

    let clips = (0..cfg.num_clips)
        .map(|k| {
            let skill = SKILL_CYCLE[k % SKILL_CYCLE.len()];
            let positions: Vec<&str> = match skill {
                PrimitiveSkill::Pick => vec![from],
                PrimitiveSkill::MoveWithObject => vec![from, to],
                PrimitiveSkill::Place => vec![to],
                PrimitiveSkill::Twist => vec!["clockwise"],
                _ => vec![to],
            };
            Clip {
                start_frame: bounds[k],
                end_frame: bounds[k + 1],
                skill,
                description: skill.describe(&format!("the {object}"), &positions),
                object_id: Some(object.to_string()),
            }
        })
        .collect();

    let episode = Episode {
        episode_id: id.to_string(),
        source_setting: if cfg.robot == "planar2" { SourceSetting::TableTop } else { SourceSetting::InTheWild },
        robot_id: cfg.robot.clone(),
        camera,
        frames,
        annotations: AnnotationSet {
            global_description: format!("move the {object} from {from} to {to}"),
            clips,
            contact_frames: vec![ContactAnnotation {
                frame: contact,
                object_id: object.to_string(),
            }],
            object_masks,
            ..Default::default()
        },
        video_uri: None,
    };
    episode
        .validate()
        .map_err(|e| SynthError::Config(format!("generated episode invalid: {e}")))?;
    Ok(SynthEpisode {
        episode,
        truth: SynthTruth {
            ee_offset: cfg.ee_offset,
            lag: cfg.lag,
            video_onset: cfg.motion_onset,
            contact_frame: contact,
            true_frames: truth_frames,
        },
    })
}

/// Per-robot end-effector offsets planted by [`synth_corpus`].
pub fn corpus_offsets() -> BTreeMap<&'static str, [f64; 3]> {
    [("planar2", [0.05, -0.02, 0.0]), ("arm6", [0.0, 0.01, 0.08])].into()
}

/// `n` episodes alternating robots, with planted lags and, on every third
/// episode, a mask shift that the spatial correction should undo.
pub fn synth_corpus(n: usize, rng: &mut impl Rng) -> Result<Vec<SynthEpisode>, SynthError> {
    let registry = RobotRegistry::builtin();
    let offsets = corpus_offsets();
    (0..n)
        .map(|i| {
            let robot = if i % 2 == 0 { "planar2" } else { "arm6" };
            let cfg = SynthConfig {
                robot: robot.into(),
                ee_offset: offsets[robot],
                lag: if i % 4 == 3 { rng.random_range(-5..=5) } else { 0 },
                mask_shift: if i % 3 == 2 { [18.0, -14.0] } else { [0.0, 0.0] },
                num_clips: 3 + i % 3,
                ..SynthConfig::default()
            };
            synth_episode(&format!("syn_{i:03}"), &cfg, registry.get(robot)?, rng)
        })
        .collect()
}

/// Annotated keypoints with Gaussian pixel noise, drawn from frames whose
/// recorded state equals the true state (the static prefix, or any frame
/// when there is no lag).
pub fn calibration_samples(
    episodes: &[SynthEpisode],
    model: &RobotModel,
    per_episode: usize,
    noise_px: f64,
    rng: &mut impl Rng,
) -> Result<Vec<CalibrationSample>, SynthError> {
    let noise = Normal::new(0.0, noise_px.max(0.0)).map_err(|e| SynthError::Config(e.to_string()))?;
    let mut out = Vec::new();
    for se in episodes.iter().filter(|e| e.episode.robot_id == model.name) {
        let ep = &se.episode;
        let n = ep.frames.len();
        let frames: Vec<usize> = if se.truth.lag == 0 {
            (0..per_episode).map(|k| k * (n - 1) / per_episode.max(2).saturating_sub(1).max(1)).map(|f| f.min(n - 1)).collect()
        } else {
            vec![0]
        };
        let offset = Vector3::from(se.truth.ee_offset);
        for f in frames {
            let proj = project_keypoints(model, &ep.camera, &se.truth.true_frames[f], &offset)?;
            let annotated = proj
                .pixels
                .into_iter()
                .map(|(k, p)| {
                    let q = Pixel::new(p.x + noise.sample(rng), p.y + noise.sample(rng));
                    (k, Pixel::new(q.x.clamp(0.0, ep.camera.width as f64 - 1e-6), q.y.clamp(0.0, ep.camera.height as f64 - 1e-6)))
                })
                .collect();
            out.push(CalibrationSample {
                episode_id: ep.episode_id.clone(),
                frame: f,
                annotated,
            });
        }
    }
    out.dedup_by(|a, b| a.episode_id == b.episode_id && a.frame == b.frame);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::trajectory_onset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn both_robots_generate_visible_episodes() {
        let reg = RobotRegistry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for robot in ["planar2", "arm6"] {
            let cfg = SynthConfig {
                robot: robot.into(),
                ee_offset: corpus_offsets()[robot],
                ..Default::default()
            };
            let se = synth_episode("e1", &cfg, reg.get(robot).unwrap(), &mut rng).unwrap();
            assert_eq!(se.episode.frames.len(), 60);
            assert_eq!(se.episode.annotations.clips.len(), 4);
            assert_eq!(trajectory_onset(&se.episode, 0.002).frame, 10);
        }
    }

    #[test]
    fn lag_moves_recorded_onset() {
        let reg = RobotRegistry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for lag in [-5i64, -1, 3, 5] {
            let cfg = SynthConfig { lag, ..Default::default() };
            let se = synth_episode("e", &cfg, reg.get("planar2").unwrap(), &mut rng).unwrap();
            assert_eq!(trajectory_onset(&se.episode, 0.002).frame as i64, 10 + lag);
        }
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = synth_corpus(6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_corpus(6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|e| e.episode.robot_id == "arm6").count(), 3);
    }

    #[test]
    fn look_at_centers_target() {
        let cam = camera_for("arm6", 320, 240);
        let p = crate::kinematics::project_point(&cam, &Vector3::new(0.3, 0.0, 0.45)).unwrap();
        assert!((p.x - 160.0).abs() < 1e-9 && (p.y - 120.0).abs() < 1e-9);
    }
}
