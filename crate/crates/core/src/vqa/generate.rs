//! Per-family eligibility rules and item construction.
//!
//! Each family enumerates its eligibility units (a clip, a contact, a mask,
//! a frame) and draws all randomness for a unit from an RNG keyed by
//! `(seed, episode, family, unit)`, so items do not depend on which other
//! families were requested.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::templates::{fill_template, templates_for, Slots};
use super::{Answer, Choice, ImageRef, Provenance, Split, VqaContext, VqaError, VqaFamily, VqaItem};
use crate::derive::fcot::{subsample, MAX_TRACE_POINTS};
use crate::episode::{mask_bbox_centroid, Clip, Episode};
use crate::geometry::{Pixel, Rect};
use crate::overlay::{OverlaySpec, Primitive, ARROW_COLORS, ORANGE, PURPLE};
use crate::skills::PrimitiveSkill;

/// Grounding distractors overlapping the truth more than this are rejected.
pub const GROUNDING_MAX_IOU: f64 = 0.3;
pub const STEP_SEPARATOR: &str = "; ";
const JITTER_TRIES: usize = 100;
const ARROW_LENGTH: f64 = 30.0;
/// Minimum displacement, pixels, for a direction or trace to count as motion.
pub const MIN_MOTION: f64 = 2.0;
/// Trace choice needs start and end this far apart, pixels.
pub const MIN_TRACE_CHORD: f64 = 4.0;
pub const MAX_REMAINING_STEPS: usize = 5;
const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Task-level text per clip, indexed like `annotations.clips`.
pub fn subtask_texts(episode: &Episode) -> Vec<String> {
    let ann = &episode.annotations;
    match &ann.derived {
        Some(d) if d.subtask_texts.len() == ann.clips.len() => d.subtask_texts.clone(),
        _ => ann.clips.iter().map(|c| c.description.clone()).collect(),
    }
}

fn unit_rng(seed: u64, episode: &str, family: VqaFamily, unit: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [episode, family.as_str(), unit] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn ipt(p: &Pixel) -> [i64; 2] {
    [p.x.round() as i64, p.y.round() as i64]
}

fn int_rect(r: &Rect) -> Rect {
    let [a, b, c, d] = r.to_int_array();
    Rect::new(a as f64, b as f64, c as f64, d as f64)
}

fn format_box(b: [i64; 4]) -> String {
    format!("[{}, {}, {}, {}]", b[0], b[1], b[2], b[3])
}

pub(crate) fn format_points(points: &[[i64; 2]]) -> String {
    let inner: Vec<String> = points.iter().map(|p| format!("[{}, {}]", p[0], p[1])).collect();
    format!("[{}]", inner.join(", "))
}

fn humanize(object_id: &str) -> String {
    object_id.replace('_', " ")
}

fn sample<T: Clone>(rng: &mut ChaCha8Rng, pool: &[T], k: usize) -> Vec<T> {
    index::sample(rng, pool.len(), k.min(pool.len()))
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Shuffles the truth among the distractors and labels them A-D.
fn lettered<P>(rng: &mut ChaCha8Rng, truth: (String, P), others: Vec<(String, P)>) -> (Vec<Choice>, Vec<P>, String) {
    let mut all: Vec<(bool, String, P)> = std::iter::once((true, truth.0, truth.1))
        .chain(others.into_iter().map(|(c, p)| (false, c, p)))
        .collect();
    all.shuffle(rng);
    let mut choices = Vec::new();
    let mut payloads = Vec::new();
    let mut answer = String::new();
    for (i, (is_truth, content, p)) in all.into_iter().enumerate() {
        if is_truth {
            answer = LETTERS[i].to_string();
        }
        choices.push(Choice {
            label: LETTERS[i].to_string(),
            content,
        });
        payloads.push(p);
    }
    (choices, payloads, answer)
}

fn letter_list(with_brackets: bool) -> String {
    let inner = LETTERS.join(", ");
    if with_brackets {
        format!("[{inner}]")
    } else {
        inner
    }
}

/// `<CHOICE>` filling for lettered image choices; some templates bracket
/// the placeholder themselves.
fn letter_choice_slot(template: &str) -> String {
    letter_list(!template.contains("[<CHOICE>]"))
}

/// Trace pixels of a clip, `(frame, pixel)` for every projected frame.
fn clip_trace(episode: &Episode, clip: &Clip) -> Vec<(usize, Pixel)> {
    let Some(trace) = &episode.annotations.trace2d else {
        return Vec::new();
    };
    (clip.start_frame..=clip.end_frame)
        .filter_map(|f| trace.get(f).copied().flatten().map(|p| (f, p)))
        .collect()
}

fn rotate_about(p: &Pixel, c: &Pixel, quarter_turns: u32) -> Pixel {
    let (dx, dy) = (p.x - c.x, p.y - c.y);
    let (dx, dy) = match quarter_turns % 4 {
        0 => (dx, dy),
        1 => (-dy, dx),
        2 => (-dx, -dy),
        _ => (dy, -dx),
    };
    Pixel::new(c.x + dx, c.y + dy)
}

fn grounding_distractors(rng: &mut ChaCha8Rng, truth: &Rect, others: &[Rect], width: u32, height: u32) -> Vec<Rect> {
    let mut keys: BTreeSet<[i64; 4]> = [truth.to_int_array()].into();
    let mut out = Vec::new();
    let mut offer = |r: Rect, out: &mut Vec<Rect>| {
        let r = int_rect(&r);
        if out.len() < 3 && r.width() >= 1.0 && r.height() >= 1.0 && truth.iou(&r) <= GROUNDING_MAX_IOU && keys.insert(r.to_int_array()) {
            out.push(r);
        }
    };
    for r in others {
        offer(*r, &mut out);
    }
    let (bw, bh) = (truth.width().max(1.0), truth.height().max(1.0));
    let c = truth.center();
    for _ in 0..JITTER_TRIES {
        if out.len() >= 3 {
            break;
        }
        let mut signed = || rng.random_range(0.15..=0.40) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy, sx, sy) = (signed() * bw, signed() * bh, 1.0 + signed(), 1.0 + signed());
        let (hw, hh) = (bw * sx / 2.0, bh * sy / 2.0);
        let r = Rect::new(c.x + dx - hw, c.y + dy - hh, c.x + dx + hw, c.y + dy + hh).clamp_to_image(width, height);
        offer(r, &mut out);
    }
    // 3x3 tiling: at most three tiles can overlap the truth above the gate
    for gy in 0..3u32 {
        for gx in 0..3u32 {
            let x1 = (gx * width / 3) as f64;
            let y1 = (gy * height / 3) as f64;
            let x2 = ((gx + 1) * width / 3) as f64 - 1.0;
            let y2 = ((gy + 1) * height / 3) as f64 - 1.0;
            offer(Rect::new(x1, y1, x2, y2), &mut out);
        }
    }
    out
}

struct Gen<'a> {
    ep: &'a Episode,
    ctx: &'a VqaContext,
    seed: u64,
    /// Clip indices sorted by start frame.
    order: Vec<usize>,
    /// Per original clip index.
    texts: Vec<String>,
    task: String,
    items: Vec<VqaItem>,
}

struct Draft {
    slots: Slots,
    images: Vec<ImageRef>,
    choices: Option<Vec<Choice>>,
    answer: Answer,
    frames: Vec<usize>,
}

impl<'a> Gen<'a> {
    fn new(ep: &'a Episode, ctx: &'a VqaContext, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..ep.annotations.clips.len()).collect();
        order.sort_by_key(|&i| (ep.annotations.clips[i].start_frame, i));
        Gen {
            ep,
            ctx,
            seed,
            order,
            texts: subtask_texts(ep),
            task: ep.annotations.global_description.clone(),
            items: Vec::new(),
        }
    }

    fn clip(&self, n: usize) -> &'a Clip {
        &self.ep.annotations.clips[self.order[n]]
    }

    fn text(&self, n: usize) -> &str {
        &self.texts[self.order[n]]
    }

    fn k(&self) -> usize {
        self.order.len()
    }

    fn subtask_at(&self, frame: usize) -> String {
        match self.ep.clip_at(frame) {
            Some((i, _)) => self.texts[i].clone(),
            None => self.task.clone(),
        }
    }

    /// First frame of the clip containing `frame`, or `frame` itself.
    fn clip_start_for(&self, frame: usize) -> usize {
        self.ep.clip_at(frame).map_or(frame, |(_, c)| c.start_frame)
    }

    fn rng(&self, family: VqaFamily, unit: &str) -> ChaCha8Rng {
        unit_rng(self.seed, &self.ep.episode_id, family, unit)
    }

    fn image(&self, frame: usize, overlay: Option<OverlaySpec>) -> ImageRef {
        ImageRef {
            episode_id: self.ep.episode_id.clone(),
            frame,
            frame_ref: self.ep.frame_ref(frame),
            overlay,
            rendered: None,
        }
    }

    fn base_slots(&self, subtask: Option<String>) -> Slots {
        Slots {
            task: Some(self.task.clone()),
            long_horizon: Some(self.task.clone()),
            subtask,
            ..Default::default()
        }
    }

    /// Picks a template, fills it and records the item. `choice_slot` maps
    /// the chosen template to the `<CHOICE>` text.
    fn push(&mut self, family: VqaFamily, unit: &str, rng: &mut ChaCha8Rng, draft: Draft, choice_slot: Option<&dyn Fn(&str) -> String>) {
        let bank = templates_for(family);
        let template_index = rng.random_range(0..bank.len());
        let template = &bank[template_index];
        let mut slots = draft.slots;
        if let Some(f) = choice_slot {
            slots.choice = Some(f(template));
        }
        let mut frames = draft.frames;
        frames.sort_unstable();
        frames.dedup();
        self.items.push(VqaItem {
            item_id: format!("{}:{}:{}", self.ep.episode_id, family, unit),
            family,
            axis: family.axis(),
            template_index,
            prompt: fill_template(template, &slots),
            images: draft.images,
            choices: draft.choices,
            answer: draft.answer,
            split: Split::Train,
            provenance: Provenance {
                episode_id: self.ep.episode_id.clone(),
                frames,
            },
        });
    }

    fn run(&mut self, family: VqaFamily) {
        use VqaFamily::*;
        match family {
            GroundingChoice => self.grounding_choice(),
            GraspPoseChoice => self.grasp_pose_choice(),
            SceneUnderstanding => self.scene_understanding(),
            ContactDecide => self.contact_decide(),
            GroundingGeneration => self.grounding_generation(),
            GraspAffordanceBox | GraspAffordanceKeypoint => self.grasp_affordance(family),
            GripperDetection => self.gripper_detection(),
            PlaceAffordance => self.place_affordance(),
            TraceChoice => self.trace_choice(),
            TraceDirectionChoice => self.trace_direction_choice(),
            TraceLangChoice => self.trace_lang_choice(),
            PastMultiTaskSelection | FutureMultiTaskSelection => self.multi_task_selection(family),
            PastPrimitiveSelection | FuturePrimitiveSelection => self.primitive_selection(family),
            TemporalUnderstanding => self.temporal_understanding(),
            SuccessPositive | SuccessNegative | DiscriminativeAffordancePositive | DiscriminativeAffordanceNegative => {
                self.yes_no(family)
            }
            TraceEasy | TraceHard => self.trace_generation(family),
            Planning | PlanningWithContext | PlanningRemainingSteps | GenerativeAffordance | FuturePrediction
            | PastDescription => self.planning(family),
        }
    }

    /// Latest non-empty mask of `object` at or before `frame`, with its box.
    fn mask_box_before(&self, object: &str, frame: usize) -> Option<(usize, Rect)> {
        self.ep
            .annotations
            .object_masks
            .get(object)?
            .iter()
            .filter(|m| m.frame <= frame)
            .max_by_key(|m| m.frame)
            .and_then(|m| mask_bbox_centroid(&m.rle).ok().map(|(b, _)| (m.frame, b)))
    }

    fn grounding_choice(&mut self) {
        let (w, h) = (self.ep.camera.width, self.ep.camera.height);
        for (ci, contact) in self.ep.annotations.contact_frames.iter().enumerate() {
            let Some((mframe, truth)) = self.mask_box_before(&contact.object_id, contact.frame) else {
                continue;
            };
            let truth = int_rect(&truth);
            let others: Vec<Rect> = self
                .ep
                .annotations
                .object_masks
                .iter()
                .filter(|(id, _)| **id != contact.object_id)
                .filter_map(|(id, _)| self.ep.annotations.mask_at(id, mframe))
                .filter_map(|m| mask_bbox_centroid(m).ok().map(|(b, _)| b))
                .collect();
            let unit = format!("contact{ci}");
            let mut rng = self.rng(VqaFamily::GroundingChoice, &unit);
            let distractors = grounding_distractors(&mut rng, &truth, &others, w, h);
            let as_option = |r: Rect| (format_box(r.to_int_array()), r);
            let (choices, rects, answer) =
                lettered(&mut rng, as_option(truth), distractors.into_iter().map(as_option).collect());
            let images = rects
                .into_iter()
                .map(|rect| {
                    self.image(
                        mframe,
                        Some(OverlaySpec {
                            primitives: vec![Primitive::Box { color: PURPLE, rect }],
                        }),
                    )
                })
                .collect();
            let draft = Draft {
                slots: self.base_slots(None),
                images,
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![mframe],
            };
            self.push(VqaFamily::GroundingChoice, &unit, &mut rng, draft, Some(&letter_choice_slot));
        }
    }

    fn grasp_pose_choice(&mut self) {
        let Some(derived) = &self.ep.annotations.derived else { return };
        let Some(trace) = &self.ep.annotations.trace2d else { return };
        for (gi, g) in derived.grasps.iter().enumerate() {
            let Some(at) = trace.get(g.frame).copied().flatten() else {
                continue;
            };
            let mean = |key: &str| -> Option<Pixel> {
                let pts: Vec<&Pixel> = g.contact_points.iter().filter(|(k, _)| k.contains(key)).map(|(_, p)| p).collect();
                (!pts.is_empty()).then(|| {
                    let n = pts.len() as f64;
                    Pixel::new(pts.iter().map(|p| p.x).sum::<f64>() / n, pts.iter().map(|p| p.y).sum::<f64>() / n)
                })
            };
            let angle = match (mean("jaw"), mean("tip")) {
                (Some(j), Some(t)) if j.distance(&t) > 0.0 => (t.y - j.y).atan2(t.x - j.x),
                _ => std::f64::consts::FRAC_PI_2,
            };
            let image_frame = self.clip_start_for(g.frame);
            let unit = format!("grasp{gi}");
            let mut rng = self.rng(VqaFamily::GraspPoseChoice, &unit);
            let option = |quarter: u32| {
                let a = angle + quarter as f64 * std::f64::consts::FRAC_PI_2;
                let deg = (a.to_degrees().round() as i64).rem_euclid(360);
                (format!("{},{},{}", ipt(&at)[0], ipt(&at)[1], deg), a)
            };
            let (choices, angles, answer) = lettered(&mut rng, option(0), (1..4).map(option).collect());
            let images = angles
                .into_iter()
                .map(|angle| {
                    self.image(
                        image_frame,
                        Some(OverlaySpec {
                            primitives: vec![Primitive::ForkMarker { color: ORANGE, at, angle }],
                        }),
                    )
                })
                .collect();
            let draft = Draft {
                slots: self.base_slots(None),
                images,
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![image_frame, g.frame],
            };
            self.push(VqaFamily::GraspPoseChoice, &unit, &mut rng, draft, Some(&letter_choice_slot));
        }
    }

    fn scene_understanding(&mut self) {
        let foreign = self.ctx.foreign_scenes(self.ep);
        if foreign.len() < 3 {
            return;
        }
        let unit = "scene";
        let mut rng = self.rng(VqaFamily::SceneUnderstanding, unit);
        let picked = sample(&mut rng, &foreign, 3);
        let own = self.image(0, None);
        let others = picked
            .into_iter()
            .map(|s| {
                (
                    s.frame_ref.clone(),
                    ImageRef {
                        episode_id: s.episode_id.clone(),
                        frame: 0,
                        frame_ref: s.frame_ref.clone(),
                        overlay: None,
                        rendered: None,
                    },
                )
            })
            .collect();
        let (choices, images, answer) = lettered(&mut rng, (own.frame_ref.clone(), own), others);
        let draft = Draft {
            slots: self.base_slots(None),
            images,
            choices: Some(choices),
            answer: Answer::Label(answer),
            frames: vec![0],
        };
        self.push(VqaFamily::SceneUnderstanding, unit, &mut rng, draft, None);
    }

    fn yes_no_choices() -> Vec<Choice> {
        ["Yes", "No"]
            .iter()
            .map(|s| Choice {
                label: s.to_string(),
                content: s.to_string(),
            })
            .collect()
    }

    fn contact_decide(&mut self) {
        for (ci, contact) in self.ep.annotations.contact_frames.iter().enumerate() {
            let Some((i, clip)) = self.ep.clip_at(contact.frame) else {
                continue;
            };
            let subtask = self.texts[i].clone();
            let cases = [
                (clip.end_frame > contact.frame, clip.end_frame, "Yes", "after"),
                (clip.start_frame < contact.frame, clip.start_frame, "No", "before"),
            ];
            for (eligible, frame, answer, tag) in cases {
                if !eligible {
                    continue;
                }
                let unit = format!("contact{ci}-{tag}");
                let mut rng = self.rng(VqaFamily::ContactDecide, &unit);
                let draft = Draft {
                    slots: self.base_slots(Some(subtask.clone())),
                    images: vec![self.image(frame, None)],
                    choices: Some(Self::yes_no_choices()),
                    answer: Answer::Label(answer.into()),
                    frames: vec![frame, contact.frame],
                };
                self.push(VqaFamily::ContactDecide, &unit, &mut rng, draft, None);
            }
        }
    }

    fn grounding_generation(&mut self) {
        for (object, masks) in &self.ep.annotations.object_masks {
            for m in masks {
                let Ok((bbox, _)) = mask_bbox_centroid(&m.rle) else {
                    continue;
                };
                let unit = format!("{object}@{}", m.frame);
                let mut rng = self.rng(VqaFamily::GroundingGeneration, &unit);
                let mut slots = self.base_slots(Some(self.subtask_at(m.frame)));
                slots.object = Some(humanize(object));
                let draft = Draft {
                    slots,
                    images: vec![self.image(m.frame, None)],
                    choices: None,
                    answer: Answer::Box(bbox.to_int_array()),
                    frames: vec![m.frame],
                };
                self.push(VqaFamily::GroundingGeneration, &unit, &mut rng, draft, None);
            }
        }
    }

    fn grasp_affordance(&mut self, family: VqaFamily) {
        let Some(derived) = &self.ep.annotations.derived else { return };
        for (gi, g) in derived.grasps.iter().enumerate() {
            let answer = if family == VqaFamily::GraspAffordanceBox {
                Answer::Box(g.affordance_box.to_int_array())
            } else {
                if g.contact_points.is_empty() {
                    continue;
                }
                Answer::Points(g.contact_points.values().map(ipt).collect())
            };
            let image_frame = self.clip_start_for(g.frame);
            let unit = format!("grasp{gi}");
            let mut rng = self.rng(family, &unit);
            let draft = Draft {
                slots: self.base_slots(Some(self.subtask_at(g.frame))),
                images: vec![self.image(image_frame, None)],
                choices: None,
                answer,
                frames: vec![image_frame, g.frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }

    fn gripper_detection(&mut self) {
        let Some(derived) = &self.ep.annotations.derived else { return };
        for (frame, b) in derived.gripper_boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            let unit = format!("f{frame}");
            let mut rng = self.rng(VqaFamily::GripperDetection, &unit);
            let draft = Draft {
                slots: Slots::default(),
                images: vec![self.image(frame, None)],
                choices: None,
                answer: Answer::Box(b.to_int_array()),
                frames: vec![frame],
            };
            self.push(VqaFamily::GripperDetection, &unit, &mut rng, draft, None);
        }
    }

    fn place_affordance(&mut self) {
        let Some(derived) = &self.ep.annotations.derived else { return };
        for p in &derived.placements {
            let clip = &self.ep.annotations.clips[p.clip_index];
            let unit = format!("clip{}", p.clip_index);
            let mut rng = self.rng(VqaFamily::PlaceAffordance, &unit);
            let mut slots = self.base_slots(Some(self.texts[p.clip_index].clone()));
            slots.object = Some(humanize(&p.object_id));
            let draft = Draft {
                slots,
                images: vec![self.image(clip.start_frame, None)],
                choices: None,
                answer: Answer::Box(p.rect.to_int_array()),
                frames: vec![clip.start_frame, clip.end_frame],
            };
            self.push(VqaFamily::PlaceAffordance, &unit, &mut rng, draft, None);
        }
    }

    fn trace_choice(&mut self) {
        for n in 0..self.k() {
            let clip = self.clip(n);
            let pts: Vec<Pixel> = clip_trace(self.ep, clip).into_iter().map(|(_, p)| p).collect();
            if pts.len() < 2 || pts[0].distance(pts.last().unwrap()) < MIN_TRACE_CHORD {
                continue;
            }
            let sub = subsample(&pts, MAX_TRACE_POINTS);
            let n_pts = sub.len() as f64;
            let centroid = Pixel::new(sub.iter().map(|p| p.x).sum::<f64>() / n_pts, sub.iter().map(|p| p.y).sum::<f64>() / n_pts);
            let option = |quarter: u32| {
                let rotated: Vec<Pixel> = sub.iter().map(|p| rotate_about(p, &centroid, quarter)).collect();
                let key: Vec<[i64; 2]> = rotated.iter().map(ipt).collect();
                (format_points(&key), rotated)
            };
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(VqaFamily::TraceChoice, &unit);
            let (choices, traces, answer) = lettered(&mut rng, option(0), (1..4).map(option).collect());
            let images = traces
                .into_iter()
                .map(|points| {
                    self.image(
                        clip.start_frame,
                        Some(OverlaySpec {
                            primitives: vec![Primitive::Polyline { points }],
                        }),
                    )
                })
                .collect();
            let draft = Draft {
                slots: self.base_slots(Some(self.text(n).to_string())),
                images,
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![clip.start_frame, clip.end_frame],
            };
            self.push(VqaFamily::TraceChoice, &unit, &mut rng, draft, Some(&letter_choice_slot));
        }
    }

    fn trace_direction_choice(&mut self) {
        let Some(trace) = &self.ep.annotations.trace2d else { return };
        for n in 0..self.k() {
            let clip = self.clip(n);
            let Some(p0) = trace.get(clip.start_frame).copied().flatten() else {
                continue;
            };
            let moved = clip_trace(self.ep, clip)
                .into_iter()
                .find(|(f, p)| *f > clip.start_frame && p.distance(&p0) >= MIN_MOTION);
            let Some((to_frame, p1)) = moved else { continue };
            let angle = (p1.y - p0.y).atan2(p1.x - p0.x);
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(VqaFamily::TraceDirectionChoice, &unit);
            let mut colors: Vec<usize> = (0..4).collect();
            colors.shuffle(&mut rng);
            // colors[q] is the color of the arrow rotated by q quarter turns
            let mut primitives = Vec::new();
            let mut choices = Vec::new();
            for (ci, (name, rgb)) in ARROW_COLORS.iter().enumerate() {
                let q = colors.iter().position(|&c| c == ci).unwrap();
                let a = angle + q as f64 * std::f64::consts::FRAC_PI_2;
                let to = Pixel::new(p0.x + ARROW_LENGTH * a.cos(), p0.y + ARROW_LENGTH * a.sin());
                primitives.push(Primitive::Arrow { color: *rgb, from: p0, to });
                choices.push(Choice {
                    label: name.to_string(),
                    content: format!("{}", (a.to_degrees().round() as i64).rem_euclid(360)),
                });
            }
            let answer = ARROW_COLORS[colors[0]].0.to_string();
            let names: Vec<&str> = ARROW_COLORS.iter().map(|(n, _)| *n).collect();
            let mut slots = self.base_slots(Some(self.text(n).to_string()));
            slots.choice = Some(format!("[{}]", names.join(", ")));
            let draft = Draft {
                slots,
                images: vec![self.image(clip.start_frame, Some(OverlaySpec { primitives }))],
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![clip.start_frame, to_frame],
            };
            self.push(VqaFamily::TraceDirectionChoice, &unit, &mut rng, draft, None);
        }
    }

    /// Distinct texts from `first` (same scene) topped up from `pool`, never
    /// containing anything in `exclude`.
    fn text_distractors(rng: &mut ChaCha8Rng, first: &[String], pool: &[String], exclude: &BTreeSet<&str>, k: usize) -> Option<Vec<String>> {
        let dedup = |v: &[String], also: &BTreeSet<String>| -> Vec<String> {
            v.iter()
                .filter(|t| !exclude.contains(t.as_str()) && !also.contains(*t))
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        let near = dedup(first, &BTreeSet::new());
        let mut picked = sample(rng, &near, k);
        if picked.len() < k {
            let taken: BTreeSet<String> = near.iter().cloned().collect();
            let far = dedup(pool, &taken);
            let more = sample(rng, &far, k - picked.len());
            picked.extend(more);
        }
        (picked.len() == k).then_some(picked)
    }

    fn trace_lang_choice(&mut self) {
        let pool = self.ctx.foreign_texts(self.ep);
        for n in 0..self.k() {
            let clip = self.clip(n);
            let pts = clip_trace(self.ep, clip);
            if pts.len() < 2 {
                continue;
            }
            let truth = self.text(n).to_string();
            let scene: Vec<String> = (0..self.k()).filter(|&m| m != n).map(|m| self.text(m).to_string()).collect();
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(VqaFamily::TraceLangChoice, &unit);
            let exclude: BTreeSet<&str> = [truth.as_str()].into();
            let Some(others) = Self::text_distractors(&mut rng, &scene, &pool, &exclude, 3) else {
                continue;
            };
            let mut texts: Vec<String> = std::iter::once(truth.clone()).chain(others).collect();
            texts.shuffle(&mut rng);
            let choices = texts
                .iter()
                .map(|t| Choice {
                    label: t.clone(),
                    content: t.clone(),
                })
                .collect();
            let quoted: Vec<String> = texts.iter().map(|t| format!("\"{t}\"")).collect();
            let mut slots = self.base_slots(None);
            slots.choice = Some(format!("[{}]", quoted.join(", ")));
            let points: Vec<Pixel> = subsample(&pts.iter().map(|(_, p)| *p).collect::<Vec<_>>(), MAX_TRACE_POINTS);
            let draft = Draft {
                slots,
                images: vec![self.image(
                    clip.start_frame,
                    Some(OverlaySpec {
                        primitives: vec![Primitive::Polyline { points }],
                    }),
                )],
                choices: Some(choices),
                answer: Answer::Label(truth),
                frames: vec![clip.start_frame, clip.end_frame],
            };
            self.push(VqaFamily::TraceLangChoice, &unit, &mut rng, draft, None);
        }
    }

    fn multi_task_selection(&mut self, family: VqaFamily) {
        let pool = self.ctx.foreign_texts(self.ep);
        for n in 1..self.k() {
            let past: Vec<String> = (0..n).map(|m| self.text(m).to_string()).collect();
            let (truth, scene, exclude): (String, Vec<String>, BTreeSet<&str>) = if family == VqaFamily::PastMultiTaskSelection {
                let future = (n..self.k()).map(|m| self.text(m).to_string()).collect();
                (past[n - 1].clone(), future, past.iter().map(String::as_str).collect())
            } else {
                let others = (0..self.k()).filter(|&m| m != n).map(|m| self.text(m).to_string()).collect();
                (self.text(n).to_string(), others, [self.text(n)].into())
            };
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(family, &unit);
            let Some(others) = Self::text_distractors(&mut rng, &scene, &pool, &exclude, 3) else {
                continue;
            };
            let (choices, options, answer) = lettered(&mut rng, (truth.clone(), truth), others.into_iter().map(|t| (t.clone(), t)).collect());
            let mut slots = self.base_slots(None);
            slots.options = options;
            let frame = self.clip(n).start_frame;
            let draft = Draft {
                slots,
                images: vec![self.image(frame, None)],
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }

    fn primitive_selection(&mut self, family: VqaFamily) {
        for n in 1..self.k() {
            let target = if family == VqaFamily::PastPrimitiveSelection { n - 1 } else { n };
            let skill = self.clip(target).skill;
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(family, &unit);
            let rest: Vec<PrimitiveSkill> = PrimitiveSkill::ALL.into_iter().filter(|s| *s != skill).collect();
            let others = sample(&mut rng, &rest, 3)
                .into_iter()
                .map(|s| (s.display_name().to_string(), s.display_name().to_string()))
                .collect();
            let name = skill.display_name().to_string();
            let (choices, options, answer) = lettered(&mut rng, (name.clone(), name), others);
            let mut slots = self.base_slots(None);
            slots.options = options;
            let frame = self.clip(n).start_frame;
            let draft = Draft {
                slots,
                images: vec![self.image(frame, None)],
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames: vec![frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }

    fn temporal_understanding(&mut self) {
        let mid = |c: &Clip| (c.start_frame + c.end_frame) / 2;
        for n in 0..self.k() {
            let own = mid(self.clip(n));
            let other_mids: Vec<usize> = (0..self.k())
                .filter(|&m| m != n)
                .map(|m| mid(self.clip(m)))
                .filter(|&f| f != own)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if other_mids.len() < 3 {
                continue;
            }
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(VqaFamily::TemporalUnderstanding, &unit);
            let picked = sample(&mut rng, &other_mids, 3);
            let opt = |f: usize| (self.ep.frame_ref(f), f);
            let (choices, frames, answer) = lettered(&mut rng, opt(own), picked.into_iter().map(opt).collect());
            let mut slots = self.base_slots(None);
            slots.task_n = Some(self.text(n).to_string());
            let draft = Draft {
                slots,
                images: frames.iter().map(|&f| self.image(f, None)).collect(),
                choices: Some(choices),
                answer: Answer::Label(answer),
                frames,
            };
            self.push(VqaFamily::TemporalUnderstanding, &unit, &mut rng, draft, None);
        }
    }

    fn yes_no(&mut self, family: VqaFamily) {
        use VqaFamily::*;
        let pool = self.ctx.foreign_texts(self.ep);
        for n in 0..self.k() {
            let clip = self.clip(n);
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(family, &unit);
            let positive = matches!(family, SuccessPositive | DiscriminativeAffordancePositive);
            let text = if positive {
                self.text(n).to_string()
            } else {
                if pool.is_empty() {
                    continue;
                }
                pool[rng.random_range(0..pool.len())].clone()
            };
            let mut slots = self.base_slots(None);
            if family == DiscriminativeAffordanceNegative {
                slots.random_task = Some(text);
            } else {
                slots.task_n = Some(text);
            }
            let frame = if matches!(family, SuccessPositive | SuccessNegative) {
                clip.end_frame
            } else {
                clip.start_frame
            };
            let draft = Draft {
                slots,
                images: vec![self.image(frame, None)],
                choices: None,
                answer: Answer::Label(if positive { "Yes" } else { "No" }.into()),
                frames: vec![frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }

    fn trace_generation(&mut self, family: VqaFamily) {
        for n in 0..self.k() {
            let clip = self.clip(n);
            let pts: Vec<[i64; 2]> = clip_trace(self.ep, clip).iter().map(|(_, p)| ipt(p)).collect();
            if pts.len() < 4 {
                continue;
            }
            let mut slots = self.base_slots(Some(self.text(n).to_string()));
            let answer = if family == VqaFamily::TraceEasy {
                let given = pts.len().div_ceil(4);
                slots.waypoints = Some(format_points(&subsample(&pts[..given], MAX_TRACE_POINTS)));
                subsample(&pts[given..], MAX_TRACE_POINTS)
            } else {
                subsample(&pts, MAX_TRACE_POINTS)
            };
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(family, &unit);
            let draft = Draft {
                slots,
                images: vec![self.image(clip.start_frame, None)],
                choices: None,
                answer: Answer::Points(answer),
                frames: vec![clip.start_frame, clip.end_frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }

    fn planning(&mut self, family: VqaFamily) {
        use VqaFamily::*;
        let first = if matches!(family, Planning | PastDescription) { 0 } else { 1 };
        for n in first..self.k() {
            let clip = self.clip(n);
            let mut slots = self.base_slots(None);
            if n > 0 {
                slots.past_tasks = Some((0..n).map(|m| self.text(m)).collect::<Vec<_>>().join(", "));
                slots.previous_task = Some(self.text(n - 1).to_string());
            }
            let answer = match family {
                PlanningRemainingSteps => (n..self.k().min(n + MAX_REMAINING_STEPS))
                    .map(|m| self.text(m))
                    .collect::<Vec<_>>()
                    .join(STEP_SEPARATOR),
                _ => self.text(n).to_string(),
            };
            let frame = if family == PastDescription { clip.end_frame } else { clip.start_frame };
            let unit = format!("clip{}", self.order[n]);
            let mut rng = self.rng(family, &unit);
            let draft = Draft {
                slots,
                images: vec![self.image(frame, None)],
                choices: None,
                answer: Answer::Text(answer),
                frames: vec![frame],
            };
            self.push(family, &unit, &mut rng, draft, None);
        }
    }
}

fn required_blocks(episode: &Episode, family: VqaFamily) -> Result<(), VqaError> {
    use VqaFamily::*;
    let ann = &episode.annotations;
    let missing = |what: &str| VqaError::MissingAnnotation {
        family,
        what: what.to_string(),
    };
    if matches!(family, GraspPoseChoice | GraspAffordanceBox | GraspAffordanceKeypoint | GripperDetection | PlaceAffordance)
        && ann.derived.is_none()
    {
        return Err(missing("derived"));
    }
    if matches!(family, GraspPoseChoice | TraceChoice | TraceDirectionChoice | TraceLangChoice | TraceEasy | TraceHard)
        && ann.trace2d.is_none()
    {
        return Err(missing("trace2d"));
    }
    Ok(())
}

/// All items of the requested families for one episode, in family order
/// then unit order.
pub fn generate_items(
    episode: &Episode,
    families: &BTreeSet<VqaFamily>,
    seed: u64,
    ctx: &VqaContext,
) -> Result<Vec<VqaItem>, VqaError> {
    for &f in families {
        required_blocks(episode, f)?;
    }
    let mut g = Gen::new(episode, ctx, seed);
    for &f in families {
        g.run(f);
    }
    Ok(g.items)
}
