//! Flexible chain-of-thought serialization.
//!
//! Textual form is a sequence of lowercase XML-like segments, one per
//! selected representation, in selection order:
//!
//! ```text
//! <subtask>pick up the cup</subtask><skill>pick</skill>
//! <object_box>20,10,29,19</object_box><gripper_box>..</gripper_box>
//! <affordance_box>..</affordance_box><trace>15,20;16,20;..</trace>
//! ```
//!
//! Boxes are integer `x1,y1,x2,y2`; traces are at most 16 uniformly
//! subsampled integer points. Text is escaped with `&lt;`, `&gt;`, `&amp;`.

use serde::{Deserialize, Serialize};

use crate::episode::{mask_bbox_centroid, Episode};
use crate::geometry::{Pixel, Rect};
use crate::kinematics::gripper_bbox;
use crate::overlay::{OverlaySpec, Primitive, ORANGE, PURPLE};
use crate::skills::PrimitiveSkill;

pub const MAX_TRACE_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcotItem {
    Subtask,
    Skill,
    ObjectBox,
    GripperBox,
    AffordanceBox,
    Trace,
}

impl FcotItem {
    pub const ALL: [FcotItem; 6] = [
        FcotItem::Subtask,
        FcotItem::Skill,
        FcotItem::ObjectBox,
        FcotItem::GripperBox,
        FcotItem::AffordanceBox,
        FcotItem::Trace,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FcotItem::Subtask => "subtask",
            FcotItem::Skill => "skill",
            FcotItem::ObjectBox => "object_box",
            FcotItem::GripperBox => "gripper_box",
            FcotItem::AffordanceBox => "affordance_box",
            FcotItem::Trace => "trace",
        }
    }

    fn from_tag(tag: &str) -> Option<FcotItem> {
        Self::ALL.into_iter().find(|i| i.tag() == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcotForm {
    Textual,
    VisualPrompt,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FcotError {
    #[error("F-CoT selection is empty")]
    EmptySpec,
    #[error("F-CoT selection repeats {0:?}")]
    Duplicate(FcotItem),
    #[error("representation {0:?} is not available at this frame")]
    MissingRepresentation(FcotItem),
    #[error("malformed F-CoT text at byte {at}: {message}")]
    Syntax { at: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcotSpec {
    items: Vec<FcotItem>,
    form: FcotForm,
}

impl FcotSpec {
    pub fn new(items: Vec<FcotItem>, form: FcotForm) -> Result<Self, FcotError> {
        if items.is_empty() {
            return Err(FcotError::EmptySpec);
        }
        for (i, it) in items.iter().enumerate() {
            if items[..i].contains(it) {
                return Err(FcotError::Duplicate(*it));
            }
        }
        Ok(Self { items, form })
    }

    pub fn items(&self) -> &[FcotItem] {
        &self.items
    }

    pub fn form(&self) -> FcotForm {
        self.form
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FcotValue {
    Subtask(String),
    Skill(PrimitiveSkill),
    ObjectBox([i64; 4]),
    GripperBox([i64; 4]),
    AffordanceBox([i64; 4]),
    Trace(Vec<[i64; 2]>),
}

impl FcotValue {
    pub fn item(&self) -> FcotItem {
        match self {
            FcotValue::Subtask(_) => FcotItem::Subtask,
            FcotValue::Skill(_) => FcotItem::Skill,
            FcotValue::ObjectBox(_) => FcotItem::ObjectBox,
            FcotValue::GripperBox(_) => FcotItem::GripperBox,
            FcotValue::AffordanceBox(_) => FcotItem::AffordanceBox,
            FcotValue::Trace(_) => FcotItem::Trace,
        }
    }

    fn body(&self) -> String {
        let join_box = |b: &[i64; 4]| format!("{},{},{},{}", b[0], b[1], b[2], b[3]);
        match self {
            FcotValue::Subtask(s) => escape(s),
            FcotValue::Skill(s) => s.as_str().to_string(),
            FcotValue::ObjectBox(b) | FcotValue::GripperBox(b) | FcotValue::AffordanceBox(b) => join_box(b),
            FcotValue::Trace(pts) => pts
                .iter()
                .map(|p| format!("{},{}", p[0], p[1]))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

pub fn render(values: &[FcotValue]) -> String {
    values
        .iter()
        .map(|v| {
            let tag = v.item().tag();
            format!("<{tag}>{}</{tag}>", v.body())
        })
        .collect()
}

fn parse_ints<const N: usize>(body: &str, sep: char, at: usize) -> Result<[i64; N], FcotError> {
    let parts: Vec<&str> = body.split(sep).collect();
    if parts.len() != N {
        return Err(FcotError::Syntax {
            at,
            message: format!("expected {N} integers in {body:?}"),
        });
    }
    let mut out = [0i64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| FcotError::Syntax {
            at,
            message: format!("bad integer {p:?}"),
        })?;
    }
    Ok(out)
}

/// Inverse of [`render`].
pub fn parse(text: &str) -> Result<Vec<FcotValue>, FcotError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let syntax = |message: &str| FcotError::Syntax {
            at: pos,
            message: message.to_string(),
        };
        if !rest.starts_with('<') {
            return Err(syntax("expected an opening tag"));
        }
        let close = rest.find('>').ok_or_else(|| syntax("unterminated tag"))?;
        let tag = &rest[1..close];
        let item = FcotItem::from_tag(tag).ok_or_else(|| syntax(&format!("unknown tag {tag:?}")))?;
        let end_tag = format!("</{tag}>");
        let body_start = close + 1;
        let body_len = rest[body_start..]
            .find(&end_tag)
            .ok_or_else(|| syntax(&format!("missing {end_tag}")))?;
        let body = &rest[body_start..body_start + body_len];
        let at = pos + body_start;
        out.push(match item {
            FcotItem::Subtask => FcotValue::Subtask(unescape(body)),
            FcotItem::Skill => FcotValue::Skill(body.parse().map_err(|_| FcotError::Syntax {
                at,
                message: format!("unknown skill {body:?}"),
            })?),
            FcotItem::ObjectBox => FcotValue::ObjectBox(parse_ints(body, ',', at)?),
            FcotItem::GripperBox => FcotValue::GripperBox(parse_ints(body, ',', at)?),
            FcotItem::AffordanceBox => FcotValue::AffordanceBox(parse_ints(body, ',', at)?),
            FcotItem::Trace => FcotValue::Trace(if body.is_empty() {
                Vec::new()
            } else {
                body.split(';')
                    .map(|p| parse_ints::<2>(p, ',', at))
                    .collect::<Result<_, _>>()?
            }),
        });
        pos += body_start + body_len + end_tag.len();
    }
    Ok(out)
}

/// At most `max` points picked at uniformly spaced indices, endpoints kept.
pub fn subsample<T: Clone>(points: &[T], max: usize) -> Vec<T> {
    let n = points.len();
    if n <= max {
        return points.to_vec();
    }
    if max < 2 {
        return points[..max].to_vec();
    }
    (0..max)
        .map(|i| points[((i * (n - 1)) as f64 / (max - 1) as f64).round() as usize].clone())
        .collect()
}

fn int_point(p: &Pixel) -> [i64; 2] {
    [p.x.round() as i64, p.y.round() as i64]
}

/// Representation values at a frame, before serialization.
struct FrameView<'a> {
    episode: &'a Episode,
    frame: usize,
}

impl FrameView<'_> {
    fn clip(&self) -> Option<(usize, &crate::episode::Clip)> {
        self.episode.clip_at(self.frame)
    }

    fn object_id(&self) -> Option<&str> {
        let ann = &self.episode.annotations;
        self.clip()
            .and_then(|(_, c)| c.object_id.as_deref())
            .or_else(|| ann.contact_frames.first().map(|c| c.object_id.as_str()))
    }

    fn subtask(&self) -> Option<String> {
        let (i, c) = self.clip()?;
        let derived = self.episode.annotations.derived.as_ref();
        Some(
            derived
                .and_then(|d| d.subtask_texts.get(i).cloned())
                .unwrap_or_else(|| c.description.clone()),
        )
    }

    fn object_box(&self) -> Option<Rect> {
        let obj = self.object_id()?;
        let entries = self.episode.annotations.object_masks.get(obj)?;
        let m = entries.iter().rev().find(|m| m.frame <= self.frame)?;
        mask_bbox_centroid(&m.rle).ok().map(|(b, _)| b)
    }

    fn gripper_box(&self) -> Option<Rect> {
        let e = self.episode;
        if let Some(b) = e.annotations.derived.as_ref().and_then(|d| d.gripper_boxes.get(self.frame)) {
            return *b;
        }
        let kps = e.annotations.keypoints2d.as_ref()?.get(self.frame)?;
        gripper_bbox(kps, e.camera.width, e.camera.height).ok()
    }

    fn affordance_box(&self) -> Option<Rect> {
        let grasps = &self.episode.annotations.derived.as_ref()?.grasps;
        let obj = self.object_id();
        grasps
            .iter()
            .find(|g| Some(g.object_id.as_str()) == obj)
            .or_else(|| grasps.first())
            .map(|g| g.affordance_box)
    }

    /// Remaining TCP trace from this frame to the end of its clip.
    fn trace(&self) -> Option<Vec<Pixel>> {
        let end = self.clip().map_or(self.episode.num_frames() - 1, |(_, c)| c.end_frame);
        let trace = self.episode.annotations.trace2d.as_ref()?;
        let pts: Vec<Pixel> = trace[self.frame..=end].iter().flatten().copied().collect();
        (!pts.is_empty()).then(|| subsample(&pts, MAX_TRACE_POINTS))
    }

    fn value(&self, item: FcotItem) -> Result<FcotValue, FcotError> {
        let missing = FcotError::MissingRepresentation(item);
        Ok(match item {
            FcotItem::Subtask => FcotValue::Subtask(self.subtask().ok_or(missing)?),
            FcotItem::Skill => FcotValue::Skill(self.clip().ok_or(missing)?.1.skill),
            FcotItem::ObjectBox => FcotValue::ObjectBox(self.object_box().ok_or(missing)?.to_int_array()),
            FcotItem::GripperBox => FcotValue::GripperBox(self.gripper_box().ok_or(missing)?.to_int_array()),
            FcotItem::AffordanceBox => FcotValue::AffordanceBox(self.affordance_box().ok_or(missing)?.to_int_array()),
            FcotItem::Trace => FcotValue::Trace(self.trace().ok_or(missing)?.iter().map(int_point).collect()),
        })
    }
}

/// Values of the selected representations at `frame`, in selection order.
pub fn collect_values(episode: &Episode, frame: usize, spec: &FcotSpec) -> Result<Vec<FcotValue>, FcotError> {
    let view = FrameView { episode, frame };
    spec.items.iter().map(|&i| view.value(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum FcotOutput {
    Textual { text: String },
    /// Geometric items drawn as an overlay; language items stay textual.
    VisualPrompt { text: String, overlay: OverlaySpec },
}

fn rect_of(b: &[i64; 4]) -> Rect {
    Rect::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
}

pub fn serialize_fcot(episode: &Episode, frame: usize, spec: &FcotSpec) -> Result<FcotOutput, FcotError> {
    let values = collect_values(episode, frame, spec)?;
    match spec.form {
        FcotForm::Textual => Ok(FcotOutput::Textual { text: render(&values) }),
        FcotForm::VisualPrompt => {
            let mut text_values = Vec::new();
            let mut overlay = OverlaySpec::default();
            for v in values {
                match &v {
                    FcotValue::ObjectBox(b) | FcotValue::AffordanceBox(b) => overlay.primitives.push(Primitive::Box {
                        color: PURPLE,
                        rect: rect_of(b),
                    }),
                    FcotValue::GripperBox(b) => overlay.primitives.push(Primitive::Box {
                        color: ORANGE,
                        rect: rect_of(b),
                    }),
                    FcotValue::Trace(pts) => overlay.primitives.push(Primitive::Polyline {
                        points: pts.iter().map(|p| Pixel::new(p[0] as f64, p[1] as f64)).collect(),
                    }),
                    FcotValue::Subtask(_) | FcotValue::Skill(_) => text_values.push(v),
                }
            }
            Ok(FcotOutput::VisualPrompt {
                text: render(&text_values),
                overlay,
            })
        }
    }
}
