//! Visual-prompt overlays: boxes, arrows, gradient traces and fork markers
//! rasterized onto RGB frames.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pixel, Rect};

pub const PURPLE: [u8; 3] = [128, 0, 128];
pub const ORANGE: [u8; 3] = [255, 165, 0];
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BOX_STROKE: u32 = 2;

/// Named colors for multi-arrow prompts, in choice order.
pub const ARROW_COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [255, 0, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
];

/// Fork marker geometry, pixels.
pub const FORK_HANDLE: f64 = 15.0;
pub const FORK_CROSSBAR: f64 = 12.0;
pub const FORK_PRONG: f64 = 20.0;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("image is {actual:?}, expected {expected:?}")]
pub struct DimMismatchError {
    pub actual: (u32, u32),
    pub expected: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { color: [u8; 3], rect: Rect },
    Arrow { color: [u8; 3], from: Pixel, to: Pixel },
    /// Colored from green at the first pixel to red at the last.
    Polyline { points: Vec<Pixel> },
    /// Two-prong gripper glyph whose handle starts at `at` and points along `angle` (radians, image frame).
    ForkMarker { color: [u8; 3], at: Pixel, angle: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub primitives: Vec<Primitive>,
}

impl OverlaySpec {
    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Copy with every coordinate clamped into a `width` x `height` image.
    pub fn clamped(&self, width: u32, height: u32) -> OverlaySpec {
        let cp = |p: &Pixel| clamp_pixel(p, width, height);
        let primitives = self
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Box { color, rect } => Primitive::Box {
                    color: *color,
                    rect: rect.clamp_to_image(width, height),
                },
                Primitive::Arrow { color, from, to } => Primitive::Arrow {
                    color: *color,
                    from: cp(from),
                    to: cp(to),
                },
                Primitive::Polyline { points } => Primitive::Polyline {
                    points: points.iter().map(cp).collect(),
                },
                Primitive::ForkMarker { color, at, angle } => Primitive::ForkMarker {
                    color: *color,
                    at: cp(at),
                    angle: *angle,
                },
            })
            .collect();
        OverlaySpec { primitives }
    }
}

fn clamp_pixel(p: &Pixel, width: u32, height: u32) -> Pixel {
    Pixel::new(
        p.x.clamp(0.0, (width.max(1) - 1) as f64),
        p.y.clamp(0.0, (height.max(1) - 1) as f64),
    )
}

/// Integer pixels of the segment from `a` to `b`, both ends included.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn round(p: &Pixel) -> (i64, i64) {
    (p.x.round() as i64, p.y.round() as i64)
}

/// Pixel sequence of a polyline, joints visited once.
pub fn polyline_pixels(points: &[Pixel]) -> Vec<(i64, i64)> {
    let mut out: Vec<(i64, i64)> = Vec::new();
    match points {
        [] => {}
        [only] => out.push(round(only)),
        _ => {
            for w in points.windows(2) {
                let seg = bresenham(round(&w[0]), round(&w[1]));
                let skip = usize::from(out.last() == seg.first());
                out.extend(seg.into_iter().skip(skip));
            }
        }
    }
    out
}

/// Gradient color at position `i` of `n`.
pub fn gradient(i: usize, n: usize) -> [u8; 3] {
    let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    [(255.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8, 0]
}

/// Pixels of a box outline `BOX_STROKE` pixels thick, drawn inward.
pub fn box_ring_pixels(rect: &Rect) -> Vec<(i64, i64)> {
    let [x1, y1, x2, y2] = rect.to_int_array();
    let s = BOX_STROKE as i64;
    let mut out = Vec::new();
    for y in y1..=y2 {
        for x in x1..=x2 {
            if x < x1 + s || x > x2 - s || y < y1 + s || y > y2 - s {
                out.push((x, y));
            }
        }
    }
    out
}

fn arrow_pixels(from: &Pixel, to: &Pixel) -> Vec<(i64, i64)> {
    let mut px = bresenham(round(from), round(to));
    let (dx, dy) = (to.x - from.x, to.y - from.y);
    let len = dx.hypot(dy);
    if len > 0.0 {
        let head = (len * 0.3).clamp(3.0, 8.0);
        let back = dy.atan2(dx) + std::f64::consts::PI;
        for side in [-0.5, 0.5] {
            let a = back + side;
            let tip = Pixel::new(to.x + head * a.cos(), to.y + head * a.sin());
            px.extend(bresenham(round(to), round(&tip)));
        }
    }
    px
}

fn fork_pixels(at: &Pixel, angle: f64) -> Vec<(i64, i64)> {
    let (c, s) = (angle.cos(), angle.sin());
    let along = |p: &Pixel, d: f64| Pixel::new(p.x + d * c, p.y + d * s);
    let across = |p: &Pixel, d: f64| Pixel::new(p.x - d * s, p.y + d * c);
    let neck = along(at, FORK_HANDLE);
    let left = across(&neck, FORK_CROSSBAR / 2.0);
    let right = across(&neck, -FORK_CROSSBAR / 2.0);
    let mut px = bresenham(round(at), round(&neck));
    px.extend(bresenham(round(&left), round(&right)));
    px.extend(bresenham(round(&left), round(&along(&left, FORK_PRONG))));
    px.extend(bresenham(round(&right), round(&along(&right, FORK_PRONG))));
    px
}

fn put(img: &mut RgbImage, (x, y): (i64, i64), color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Draws `spec` onto a copy of `image` after clamping it to the image.
pub fn render_overlay(image: &RgbImage, spec: &OverlaySpec, expected: (u32, u32)) -> Result<RgbImage, DimMismatchError> {
    let actual = image.dimensions();
    if actual != expected {
        return Err(DimMismatchError { actual, expected });
    }
    let mut out = image.clone();
    for prim in spec.clamped(actual.0, actual.1).primitives {
        match prim {
            Primitive::Box { color, rect } => {
                for p in box_ring_pixels(&rect) {
                    put(&mut out, p, color);
                }
            }
            Primitive::Arrow { color, from, to } => {
                for p in arrow_pixels(&from, &to) {
                    put(&mut out, p, color);
                }
            }
            Primitive::Polyline { points } => {
                let px = polyline_pixels(&points);
                let n = px.len();
                for (i, p) in px.into_iter().enumerate() {
                    put(&mut out, p, gradient(i, n));
                }
            }
            Primitive::ForkMarker { color, at, angle } => {
                for p in fork_pixels(&at, angle) {
                    put(&mut out, p, color);
                }
            }
        }
    }
    Ok(out)
}

/// Flat gray canvas used when no frame image is available.
pub fn blank_frame(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb([96, 96, 96]))
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn empty_spec_leaves_image_unchanged() {
        let img = blank_frame(32, 24);
        assert_eq!(render_overlay(&img, &OverlaySpec::default(), (32, 24)).unwrap(), img);
    }

    #[test]
    fn wrong_size_rejected() {
        let img = blank_frame(32, 24);
        assert!(render_overlay(&img, &OverlaySpec::default(), (64, 48)).is_err());
    }

    #[test]
    fn two_point_polyline_runs_green_to_red() {
        let img = RgbImage::new(40, 40);
        let spec = OverlaySpec {
            primitives: vec![Primitive::Polyline {
                points: vec![Pixel::new(5.0, 5.0), Pixel::new(30.0, 12.0)],
            }],
        };
        let out = render_overlay(&img, &spec, (40, 40)).unwrap();
        assert_eq!(out.get_pixel(5, 5).0, GREEN);
        assert_eq!(out.get_pixel(30, 12).0, RED);
    }

    #[test]
    fn box_ring_matches_brute_force() {
        let img = RgbImage::new(40, 40);
        let spec = OverlaySpec {
            primitives: vec![Primitive::Box {
                color: PURPLE,
                rect: Rect::new(10.0, 10.0, 20.0, 20.0),
            }],
        };
        let out = render_overlay(&img, &spec, (40, 40)).unwrap();
        let drawn: BTreeSet<(u32, u32)> = out
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0 != [0, 0, 0])
            .map(|(x, y, _)| (x, y))
            .collect();
        let mut oracle = BTreeSet::new();
        for y in 0..40u32 {
            for x in 0..40u32 {
                let inside = (10..=20).contains(&x) && (10..=20).contains(&y);
                let core = (12..=18).contains(&x) && (12..=18).contains(&y);
                if inside && !core {
                    oracle.insert((x, y));
                }
            }
        }
        assert_eq!(drawn, oracle);
    }

    #[test]
    fn bresenham_endpoints_and_continuity() {
        for &(a, b) in &[((0, 0), (7, 3)), ((5, 5), (-2, 9)), ((3, 3), (3, 3)), ((0, 9), (0, 0))] {
            let px = bresenham(a, b);
            assert_eq!(px[0], a);
            assert_eq!(*px.last().unwrap(), b);
            for w in px.windows(2) {
                assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
            }
        }
    }

    #[test]
    fn overlay_spec_serializes_with_kind_tags() {
        let spec = OverlaySpec {
            primitives: vec![Primitive::ForkMarker {
                color: ORANGE,
                at: Pixel::new(1.0, 2.0),
                angle: 0.0,
            }],
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"fork_marker\""));
        assert_eq!(serde_json::from_str::<OverlaySpec>(&text).unwrap(), spec);
    }
}
