//! Robot descriptions, forward kinematics and pinhole projection.
//!
//! Robot files use a URDF subset: `link`, and `joint` elements of type
//! `revolute` (or `continuous`), `prismatic` or `fixed` with `parent`,
//! `child`, `origin xyz/rpy`, `axis` and optional `mimic`. Gripper
//! keypoints are links whose name starts with `kp_`, attached by fixed
//! joints. The `robot` element names the end-effector link via `ee_link`.
//!
//! Finger joints mimic the pseudo-joint `gripper_opening`, so one scalar
//! drives both fingers: `q = multiplier * opening + offset`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use nalgebra::{UnitQuaternion, Unit, Vector3};

use crate::episode::{CameraParams, FrameRecord};
use crate::geometry::{Pixel, Rect, Se3};

pub const KEYPOINT_PREFIX: &str = "kp_";
pub const GRIPPER_OPENING: &str = "gripper_opening";
const AXIS_NORM_TOL: f64 = 1e-9;
/// Points with camera depth at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KinematicsError {
    #[error("robot description parse error: {0}")]
    Parse(String),
    #[error("joint graph is not a tree: {0}")]
    Cycle(String),
    #[error("joint {joint:?} references unknown link {link:?}")]
    UnknownLink { joint: String, link: String },
    #[error("expected {expected} joint positions, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("need at least 2 visible keypoints, found {found}")]
    TooFewVisible { found: usize },
    #[error("unknown robot {0:?}")]
    UnknownRobot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mimic {
    pub joint: String,
    pub multiplier: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    /// Raw `origin` attributes as written in the file.
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
    pub origin: Se3,
    pub axis: Vector3<f64>,
    pub mimic: Option<Mimic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointLink {
    pub name: String,
    pub parent_link: String,
    pub offset_in_parent: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub base_link: String,
    pub ee_link: Option<String>,
    pub links: Vec<String>,
    /// Joints in parent-before-child order.
    pub joints: Vec<Joint>,
    pub keypoints: Vec<KeypointLink>,
    /// Indices into `joints` of independently actuated joints, in file order.
    pub actuated: Vec<usize>,
}

fn parse_vec3(s: Option<&str>, default: [f64; 3], what: &str) -> Result<[f64; 3], KinematicsError> {
    let Some(s) = s else { return Ok(default) };
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| KinematicsError::Parse(format!("bad number in {what}: {s:?}")))?;
    if vals.len() != 3 {
        return Err(KinematicsError::Parse(format!("{what} needs 3 numbers, got {s:?}")));
    }
    Ok([vals[0], vals[1], vals[2]])
}

fn parse_f64(s: Option<&str>, default: f64, what: &str) -> Result<f64, KinematicsError> {
    match s {
        None => Ok(default),
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| KinematicsError::Parse(format!("bad number in {what}: {s:?}"))),
    }
}

fn child_elem<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(tag))
}

fn link_attr(joint: roxmltree::Node, tag: &str, name: &str) -> Result<String, KinematicsError> {
    child_elem(joint, tag)
        .and_then(|n| n.attribute("link"))
        .map(str::to_string)
        .ok_or_else(|| KinematicsError::Parse(format!("joint {name:?} lacks <{tag} link=...>")))
}

impl RobotModel {
    pub fn parse(text: &str) -> Result<RobotModel, KinematicsError> {
        let doc = roxmltree::Document::parse(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
        let root = doc.root_element();
        if !root.has_tag_name("robot") {
            return Err(KinematicsError::Parse("root element must be <robot>".into()));
        }
        let name = root.attribute("name").unwrap_or("").to_string();
        let ee_link = root.attribute("ee_link").map(str::to_string);

        let mut links = Vec::new();
        let mut raw_joints = Vec::new();
        for node in root.children().filter(|n| n.is_element()) {
            match node.tag_name().name() {
                "link" => {
                    let n = node
                        .attribute("name")
                        .ok_or_else(|| KinematicsError::Parse("<link> without name".into()))?;
                    if links.iter().any(|l| l == n) {
                        return Err(KinematicsError::Parse(format!("duplicate link {n:?}")));
                    }
                    links.push(n.to_string());
                }
                "joint" => raw_joints.push(Self::parse_joint(node)?),
                _ => {}
            }
        }

        for j in &raw_joints {
            for l in [&j.parent, &j.child] {
                if !links.contains(l) {
                    return Err(KinematicsError::UnknownLink {
                        joint: j.name.clone(),
                        link: l.clone(),
                    });
                }
            }
        }
        if let Some(ee) = &ee_link {
            if !links.contains(ee) {
                return Err(KinematicsError::UnknownLink {
                    joint: "<robot ee_link>".into(),
                    link: ee.clone(),
                });
            }
        }

        // tree check: every link has at most one parent joint, exactly one root, all reachable
        let mut parent_of: HashMap<&str, &str> = HashMap::new();
        for j in &raw_joints {
            if parent_of.insert(&j.child, &j.name).is_some() {
                return Err(KinematicsError::Cycle(format!("link {:?} has two parent joints", j.child)));
            }
        }
        let roots: Vec<&String> = links.iter().filter(|l| !parent_of.contains_key(l.as_str())).collect();
        if roots.len() != 1 {
            return Err(KinematicsError::Cycle(format!("expected one root link, found {}", roots.len())));
        }
        let base_link = roots[0].clone();

        let mut ordered = Vec::with_capacity(raw_joints.len());
        let mut queue = VecDeque::from([base_link.clone()]);
        let mut placed = vec![false; raw_joints.len()];
        while let Some(link) = queue.pop_front() {
            for (i, j) in raw_joints.iter().enumerate() {
                if !placed[i] && j.parent == link {
                    placed[i] = true;
                    queue.push_back(j.child.clone());
                    ordered.push(i);
                }
            }
        }
        if ordered.len() != raw_joints.len() {
            return Err(KinematicsError::Cycle("some links are unreachable from the root".into()));
        }

        let joint_names: Vec<&str> = raw_joints.iter().map(|j| j.name.as_str()).collect();
        for j in &raw_joints {
            if let Some(m) = &j.mimic {
                if m.joint != GRIPPER_OPENING && !joint_names.contains(&m.joint.as_str()) {
                    return Err(KinematicsError::Parse(format!(
                        "joint {:?} mimics unknown joint {:?}",
                        j.name, m.joint
                    )));
                }
            }
        }

        // ordered joints and file-order actuated list
        let mut joints: Vec<Joint> = ordered.iter().map(|&i| raw_joints[i].clone()).collect();
        let actuated_names: Vec<String> = raw_joints
            .iter()
            .filter(|j| j.kind != JointKind::Fixed && j.mimic.is_none())
            .map(|j| j.name.clone())
            .collect();
        let actuated = actuated_names
            .iter()
            .map(|n| joints.iter().position(|j| &j.name == n).expect("joint present"))
            .collect();

        let mut keypoints = Vec::new();
        for j in &mut joints {
            if j.child.starts_with(KEYPOINT_PREFIX) {
                if j.kind != JointKind::Fixed {
                    return Err(KinematicsError::Parse(format!(
                        "keypoint link {:?} must be attached by a fixed joint",
                        j.child
                    )));
                }
                keypoints.push(KeypointLink {
                    name: j.child.clone(),
                    parent_link: j.parent.clone(),
                    offset_in_parent: j.origin.translation,
                });
            }
        }

        Ok(RobotModel {
            name,
            base_link,
            ee_link,
            links,
            joints,
            keypoints,
            actuated,
        })
    }

    fn parse_joint(node: roxmltree::Node) -> Result<Joint, KinematicsError> {
        let name = node
            .attribute("name")
            .ok_or_else(|| KinematicsError::Parse("<joint> without name".into()))?
            .to_string();
        let kind = match node.attribute("type") {
            Some("revolute") | Some("continuous") => JointKind::Revolute,
            Some("prismatic") => JointKind::Prismatic,
            Some("fixed") => JointKind::Fixed,
            other => {
                return Err(KinematicsError::Parse(format!(
                    "joint {name:?} has unsupported type {other:?}"
                )))
            }
        };
        let parent = link_attr(node, "parent", &name)?;
        let child = link_attr(node, "child", &name)?;
        let origin = child_elem(node, "origin");
        let origin_xyz = parse_vec3(origin.and_then(|o| o.attribute("xyz")), [0.0; 3], "origin xyz")?;
        let origin_rpy = parse_vec3(origin.and_then(|o| o.attribute("rpy")), [0.0; 3], "origin rpy")?;
        let a = parse_vec3(
            child_elem(node, "axis").and_then(|a| a.attribute("xyz")),
            [1.0, 0.0, 0.0],
            "axis",
        )?;
        let axis = Vector3::new(a[0], a[1], a[2]);
        if kind != JointKind::Fixed && (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
            return Err(KinematicsError::Parse(format!(
                "joint {name:?} axis must be unit length, norm is {}",
                axis.norm()
            )));
        }
        let mimic = match child_elem(node, "mimic") {
            None => None,
            Some(m) => Some(Mimic {
                joint: m
                    .attribute("joint")
                    .ok_or_else(|| KinematicsError::Parse(format!("mimic in {name:?} lacks joint")))?
                    .to_string(),
                multiplier: parse_f64(m.attribute("multiplier"), 1.0, "mimic multiplier")?,
                offset: parse_f64(m.attribute("offset"), 0.0, "mimic offset")?,
            }),
        };
        Ok(Joint {
            name,
            kind,
            parent,
            child,
            origin_xyz,
            origin_rpy,
            origin: Se3::from_xyz_rpy(origin_xyz, origin_rpy),
            axis,
            mimic,
        })
    }

    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    pub fn actuated_names(&self) -> Vec<&str> {
        self.actuated.iter().map(|&i| self.joints[i].name.as_str()).collect()
    }

    /// Pose of every link (keypoints included) in the base frame.
    pub fn forward_kinematics(
        &self,
        joint_positions: &[f64],
        gripper_opening: f64,
    ) -> Result<BTreeMap<String, Se3>, KinematicsError> {
        self.forward_kinematics_with_offset(joint_positions, gripper_opening, &Vector3::zeros())
    }

    /// Forward kinematics with an extra translation `ee_offset`, expressed in
    /// the end-effector link frame, applied before the gripper subtree.
    pub fn forward_kinematics_with_offset(
        &self,
        joint_positions: &[f64],
        gripper_opening: f64,
        ee_offset: &Vector3<f64>,
    ) -> Result<BTreeMap<String, Se3>, KinematicsError> {
        if joint_positions.len() != self.actuated.len() {
            return Err(KinematicsError::Arity {
                expected: self.actuated.len(),
                found: joint_positions.len(),
            });
        }
        let mut values: HashMap<&str, f64> = HashMap::new();
        values.insert(GRIPPER_OPENING, gripper_opening);
        for (&i, &q) in self.actuated.iter().zip(joint_positions) {
            values.insert(&self.joints[i].name, q);
        }

        let mut poses: BTreeMap<String, Se3> = BTreeMap::new();
        poses.insert(self.base_link.clone(), Se3::identity());
        let offset = Se3::from_translation(*ee_offset);
        for j in &self.joints {
            let q = match (&j.kind, &j.mimic) {
                (JointKind::Fixed, _) => 0.0,
                (_, Some(m)) => m.multiplier * values.get(m.joint.as_str()).copied().unwrap_or(0.0) + m.offset,
                (_, None) => values[j.name.as_str()],
            };
            let motion = match j.kind {
                JointKind::Fixed => Se3::identity(),
                JointKind::Revolute => {
                    Se3::from_rotation(UnitQuaternion::from_axis_angle(&Unit::new_unchecked(j.axis), q))
                }
                JointKind::Prismatic => Se3::from_translation(j.axis * q),
            };
            let mut parent = poses[&j.parent];
            if self.ee_link.as_deref() == Some(j.parent.as_str()) {
                parent = parent.compose(&offset);
            }
            poses.insert(j.child.clone(), parent.compose(&j.origin).compose(&motion));
        }
        Ok(poses)
    }
}

/// Projects a point in the robot base frame to pixel coordinates.
pub fn project_point(camera: &CameraParams, point_base: &Vector3<f64>) -> Result<Pixel, KinematicsError> {
    let p = camera.extrinsics.transform_point(point_base);
    if p.z <= MIN_DEPTH {
        return Err(KinematicsError::BehindCamera { depth: p.z });
    }
    Ok(Pixel::new(
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointProjection {
    pub pixels: BTreeMap<String, Pixel>,
    /// Keypoints that fell behind the camera.
    pub invisible: Vec<String>,
}

pub fn project_keypoints(
    model: &RobotModel,
    camera: &CameraParams,
    frame: &FrameRecord,
    ee_offset: &Vector3<f64>,
) -> Result<KeypointProjection, KinematicsError> {
    let poses = model.forward_kinematics_with_offset(&frame.joint_positions, frame.gripper_opening, ee_offset)?;
    let mut out = KeypointProjection::default();
    for kp in &model.keypoints {
        let p = poses[&kp.name].translation;
        match project_point(camera, &p) {
            Ok(px) => {
                out.pixels.insert(kp.name.clone(), px);
            }
            Err(KinematicsError::BehindCamera { .. }) => out.invisible.push(kp.name.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Projects the recorded TCP pose, shifted by `ee_offset` in its own frame.
pub fn project_tcp(camera: &CameraParams, frame: &FrameRecord, ee_offset: &Vector3<f64>) -> Result<Pixel, KinematicsError> {
    project_point(camera, &frame.tcp_pose.transform_point(ee_offset))
}

/// Tight box over the visible keypoint pixels, clamped to the image.
pub fn gripper_bbox(pixels: &BTreeMap<String, Pixel>, width: u32, height: u32) -> Result<Rect, KinematicsError> {
    if pixels.len() < 2 {
        return Err(KinematicsError::TooFewVisible { found: pixels.len() });
    }
    let r = Rect::bounding(pixels.values().copied()).expect("non-empty");
    Ok(r.clamp_to_image(width, height))
}

const BUILTIN: [(&str, &str); 2] = [
    ("planar2", include_str!("../robots/planar2.urdf")),
    ("arm6", include_str!("../robots/arm6.urdf")),
];

/// Robot models keyed by robot id: the bundled fixtures plus any `*.urdf`
/// found in a user directory (which shadow builtins of the same name).
#[derive(Debug, Clone, Default)]
pub struct RobotRegistry {
    models: BTreeMap<String, RobotModel>,
}

impl RobotRegistry {
    pub fn builtin() -> RobotRegistry {
        let models = BUILTIN
            .iter()
            .map(|(id, text)| (id.to_string(), RobotModel::parse(text).expect("bundled robot parses")))
            .collect();
        RobotRegistry { models }
    }

    pub fn with_dir(dir: &Path) -> Result<RobotRegistry, KinematicsError> {
        let mut reg = Self::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| KinematicsError::Parse(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "urdf"))
            .collect();
        paths.sort();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(|e| KinematicsError::Parse(format!("{}: {e}", p.display())))?;
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            reg.models.insert(id, RobotModel::parse(&text)?);
        }
        Ok(reg)
    }

    pub fn get(&self, robot_id: &str) -> Result<&RobotModel, KinematicsError> {
        self.models
            .get(robot_id)
            .ok_or_else(|| KinematicsError::UnknownRobot(robot_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cam(fx: f64, cx: f64, cy: f64) -> CameraParams {
        CameraParams {
            fx,
            fy: fx,
            cx,
            cy,
            width: 640,
            height: 360,
            extrinsics: Se3::identity(),
        }
    }

    #[test]
    fn planar_fixture_has_two_revolute_joints() {
        let m = RobotRegistry::builtin().get("planar2").unwrap().clone();
        assert_eq!(m.dof(), 2);
        assert!(m.actuated.iter().all(|&i| m.joints[i].kind == JointKind::Revolute));
        assert_eq!(m.keypoints.len(), 4);
    }

    #[test]
    fn gripper_fixture_has_four_keypoints_and_mimic_fingers() {
        let m = RobotRegistry::builtin().get("arm6").unwrap().clone();
        assert_eq!(m.dof(), 6);
        assert_eq!(m.keypoints.len(), 4);
        assert_eq!(m.ee_link.as_deref(), Some("flange"));
    }

    #[test]
    fn missing_link_is_reported() {
        let doc = r#"<robot name="x"><link name="a"/>
            <joint name="j" type="fixed"><parent link="a"/><child link="b"/></joint></robot>"#;
        assert_eq!(
            RobotModel::parse(doc).unwrap_err(),
            KinematicsError::UnknownLink {
                joint: "j".into(),
                link: "b".into()
            }
        );
    }

    #[test]
    fn cycle_is_rejected() {
        let doc = r#"<robot name="x"><link name="a"/><link name="b"/>
            <joint name="j1" type="fixed"><parent link="a"/><child link="b"/></joint>
            <joint name="j2" type="fixed"><parent link="b"/><child link="a"/></joint></robot>"#;
        assert!(matches!(RobotModel::parse(doc).unwrap_err(), KinematicsError::Cycle(_)));
    }

    #[test]
    fn non_unit_axis_is_rejected() {
        let doc = r#"<robot name="x"><link name="a"/><link name="b"/>
            <joint name="j" type="revolute"><parent link="a"/><child link="b"/><axis xyz="0 0 2"/></joint></robot>"#;
        assert!(matches!(RobotModel::parse(doc).unwrap_err(), KinematicsError::Parse(_)));
    }

    #[test]
    fn quarter_turn_moves_child_to_y() {
        let doc = r#"<robot name="x"><link name="a"/><link name="b"/><link name="c"/>
            <joint name="j" type="revolute"><parent link="a"/><child link="b"/><axis xyz="0 0 1"/></joint>
            <joint name="f" type="fixed"><parent link="b"/><child link="c"/><origin xyz="1 0 0"/></joint></robot>"#;
        let m = RobotModel::parse(doc).unwrap();
        let poses = m.forward_kinematics(&[FRAC_PI_2], 0.0).unwrap();
        let t = poses["c"].translation;
        assert!((t - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_configuration_composes_static_origins() {
        let m = RobotRegistry::builtin().get("planar2").unwrap().clone();
        let poses = m.forward_kinematics(&[0.0, 0.0], 0.0).unwrap();
        assert!((poses["tool"].translation - Vector3::new(0.7, 0.0, 0.1)).norm() < 1e-15);
        assert!((poses["kp_left_tip"].translation - Vector3::new(0.78, 0.03, 0.1)).norm() < 1e-15);
    }

    #[test]
    fn arity_checked() {
        let m = RobotRegistry::builtin().get("planar2").unwrap().clone();
        assert_eq!(
            m.forward_kinematics(&[0.0], 0.0).unwrap_err(),
            KinematicsError::Arity { expected: 2, found: 1 }
        );
    }

    #[test]
    fn gripper_opening_spreads_fingers() {
        let m = RobotRegistry::builtin().get("arm6").unwrap().clone();
        let q = [0.0; 6];
        let closed = m.forward_kinematics(&q, 0.0).unwrap();
        let open = m.forward_kinematics(&q, 1.0).unwrap();
        let gap = |p: &BTreeMap<String, Se3>| (p["kp_left_tip"].translation - p["kp_right_tip"].translation).norm();
        assert!((gap(&closed) - 0.01).abs() < 1e-12);
        assert!((gap(&open) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_point(&cam(1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Pixel::new(0.0, 0.0));
        assert_eq!(
            project_point(&cam(100.0, 320.0, 180.0), &Vector3::new(1.0, 0.0, 2.0)).unwrap(),
            Pixel::new(370.0, 180.0)
        );
        assert!(matches!(
            project_point(&cam(1.0, 0.0, 0.0), &Vector3::new(1.0, 1.0, 0.0)),
            Err(KinematicsError::BehindCamera { .. })
        ));
    }

    #[test]
    fn keypoints_behind_camera_are_flagged() {
        let m = RobotRegistry::builtin().get("planar2").unwrap().clone();
        let mut c = cam(100.0, 320.0, 180.0);
        // camera looking along +z with the arm plane at z = 0.1 - 1 < 0
        c.extrinsics = Se3::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let frame = FrameRecord {
            index: 0,
            timestamp: 0.0,
            joint_positions: vec![0.0, 0.0],
            gripper_opening: 0.0,
            tcp_pose: Se3::identity(),
        };
        let proj = project_keypoints(&m, &c, &frame, &Vector3::zeros()).unwrap();
        assert!(proj.pixels.is_empty());
        assert_eq!(proj.invisible.len(), 4);
    }

    #[test]
    fn bbox_rules() {
        let mut px = BTreeMap::new();
        px.insert("a".to_string(), Pixel::new(10.0, 10.0));
        assert_eq!(gripper_bbox(&px, 100, 100).unwrap_err(), KinematicsError::TooFewVisible { found: 1 });
        px.insert("b".to_string(), Pixel::new(20.0, 30.0));
        assert_eq!(gripper_bbox(&px, 100, 100).unwrap(), Rect::new(10.0, 10.0, 20.0, 30.0));
        px.insert("c".to_string(), Pixel::new(-5.0, 140.0));
        assert_eq!(gripper_bbox(&px, 100, 100).unwrap(), Rect::new(0.0, 10.0, 20.0, 99.0));
    }
}
