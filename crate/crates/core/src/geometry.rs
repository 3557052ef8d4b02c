//! Rigid transforms, pixel points and axis-aligned pixel rectangles.
//!
//! Quaternions are stored w-first and represent active rotations. Poses
//! compose left-to-right from the base: `base_T_child = base_T_parent * parent_T_child`.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Tolerance on `|q| - 1` accepted when building a pose from raw numbers.
pub const QUATERNION_NORM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm} is not within {QUATERNION_NORM_TOL} of 1")]
    NonUnitQuaternion { norm: f64 },
    #[error("non-finite value in pose")]
    NonFinite,
    #[error("degenerate rectangle ({x1}, {y1}, {x2}, {y2}): expected x1 <= x2 and y1 <= y2")]
    DegenerateRect { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// A rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation,
        }
    }

    /// Builds a pose from `t` and a w-first quaternion without renormalizing,
    /// so stored values round-trip bit-for-bit.
    pub fn from_parts(t: [f64; 3], q_wxyz: [f64; 4]) -> Result<Self, GeometryError> {
        if t.iter().chain(q_wxyz.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(GeometryError::NonUnitQuaternion { norm });
        }
        Ok(Self {
            translation: Vector3::new(t[0], t[1], t[2]),
            rotation: UnitQuaternion::new_unchecked(q),
        })
    }

    /// Rotation from roll/pitch/yaw (fixed-axis X, then Y, then Z), as in URDF origins.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self {
            translation: Vector3::new(xyz[0], xyz[1], xyz[2]),
            rotation: UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
        }
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self * other`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            translation: self.translation + self.rotation * other.translation,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let inv = self.rotation.inverse();
        Se3 {
            translation: -(inv * self.translation),
            rotation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// On-disk pose representation: `{"t": [x, y, z], "q": [w, x, y, z]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl From<&Se3> for PoseRecord {
    fn from(p: &Se3) -> Self {
        PoseRecord {
            t: p.translation_array(),
            q: p.quaternion_wxyz(),
        }
    }
}

impl Serialize for Se3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Se3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        Se3::from_parts(rec.t, rec.q).map_err(serde::de::Error::custom)
    }
}

/// A point in image coordinates (x to the right, y down), in pixels.
/// Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Pixel {
    fn from(a: [f64; 2]) -> Self {
        Pixel::new(a[0], a[1])
    }
}

impl From<Pixel> for [f64; 2] {
    fn from(p: Pixel) -> Self {
        [p.x, p.y]
    }
}

impl Pixel {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn offset(&self, d: &Pixel) -> Pixel {
        Pixel::new(self.x + d.x, self.y + d.y)
    }
}

/// Axis-aligned rectangle `(x1, y1, x2, y2)` in pixels, serialized as a 4-array.
///
/// Areas and intersections treat the rectangle as a continuous region, so
/// `(0,0,10,10)` has area 100.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for Rect {
    fn from(a: [f64; 4]) -> Self {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x1, r.y1, r.x2, r.y2]
    }
}

impl Rect {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Checked constructor rejecting inverted or non-finite rectangles.
    pub fn checked(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let r = Rect::new(x1, y1, x2, y2);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(GeometryError::DegenerateRect {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    /// Tight box over a set of points. `None` for an empty set.
    pub fn bounding(points: impl IntoIterator<Item = Pixel>) -> Option<Rect> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut r = Rect::new(first.x, first.y, first.x, first.y);
        for p in it {
            r.x1 = r.x1.min(p.x);
            r.y1 = r.y1.min(p.y);
            r.x2 = r.x2.max(p.x);
            r.y2 = r.y2.max(p.y);
        }
        Some(r)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Pixel {
        Pixel::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Two zero-area boxes score 1 when equal, else 0.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return if self == other { 1.0 } else { 0.0 };
        }
        inter / union
    }

    pub fn translate(&self, d: &Pixel) -> Rect {
        Rect::new(self.x1 + d.x, self.y1 + d.y, self.x2 + d.x, self.y2 + d.y)
    }

    /// Grow each side by `fraction` of the box extent along that axis.
    pub fn expand(&self, fraction: f64) -> Rect {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        Rect::new(self.x1 - dx, self.y1 - dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clamp to the pixel grid `[0, width-1] x [0, height-1]`.
    pub fn clamp_to_image(&self, width: u32, height: u32) -> Rect {
        let xmax = (width.max(1) - 1) as f64;
        let ymax = (height.max(1) - 1) as f64;
        Rect::new(
            self.x1.clamp(0.0, xmax),
            self.y1.clamp(0.0, ymax),
            self.x2.clamp(0.0, xmax),
            self.y2.clamp(0.0, ymax),
        )
    }

    /// Integer-rounded `[x1, y1, x2, y2]`.
    pub fn to_int_array(&self) -> [i64; 4] {
        [
            self.x1.round() as i64,
            self.y1.round() as i64,
            self.x2.round() as i64,
            self.y2.round() as i64,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn compose_with_inverse_is_identity() {
        let a = Se3 {
            translation: Vector3::new(0.3, -1.2, 2.0),
            rotation: UnitQuaternion::from_euler_angles(0.4, -0.9, 1.7),
        };
        let id = a.compose(&a.inverse());
        assert!(id.translation.norm() < 1e-12);
        assert!(id.rotation.angle() < 1e-12);
        let id2 = a.inverse().compose(&a);
        assert!(id2.translation.norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Se3::from_xyz_rpy([0.0; 3], [0.0, 0.0, FRAC_PI_2]);
        let p = r.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn from_parts_rejects_short_quaternion() {
        let err = Se3::from_parts([0.0; 3], [0.5, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, GeometryError::NonUnitQuaternion { .. }));
    }

    #[test]
    fn rect_checked_rejects_inverted() {
        assert!(Rect::checked(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(Rect::checked(0.0, 0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn expand_by_ten_percent() {
        let r = Rect::new(10.0, 10.0, 20.0, 30.0).expand(0.1);
        assert_eq!(r, Rect::new(9.0, 8.0, 21.0, 32.0));
    }
}
