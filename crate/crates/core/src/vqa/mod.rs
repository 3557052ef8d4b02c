//! Spatial and temporal VQA item generation with leakage-safe splits.

mod generate;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::overlay::OverlaySpec;

pub use generate::{generate_items, subtask_texts, GROUNDING_MAX_IOU, MAX_REMAINING_STEPS, MIN_MOTION, MIN_TRACE_CHORD, STEP_SEPARATOR};
pub use templates::{fill_template, template_pattern, templates_for, Slots};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ability {
    Understanding,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub domain: Domain,
    pub ability: Ability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaFamily {
    GroundingChoice,
    GraspPoseChoice,
    SceneUnderstanding,
    ContactDecide,
    GroundingGeneration,
    GraspAffordanceBox,
    GraspAffordanceKeypoint,
    GripperDetection,
    PlaceAffordance,
    TraceChoice,
    TraceDirectionChoice,
    TraceLangChoice,
    PastMultiTaskSelection,
    FutureMultiTaskSelection,
    PastPrimitiveSelection,
    FuturePrimitiveSelection,
    TemporalUnderstanding,
    SuccessPositive,
    SuccessNegative,
    DiscriminativeAffordancePositive,
    DiscriminativeAffordanceNegative,
    TraceEasy,
    TraceHard,
    Planning,
    PlanningWithContext,
    PlanningRemainingSteps,
    GenerativeAffordance,
    FuturePrediction,
    PastDescription,
}

impl VqaFamily {
    pub const ALL: [VqaFamily; 29] = [
        VqaFamily::GroundingChoice,
        VqaFamily::GraspPoseChoice,
        VqaFamily::SceneUnderstanding,
        VqaFamily::ContactDecide,
        VqaFamily::GroundingGeneration,
        VqaFamily::GraspAffordanceBox,
        VqaFamily::GraspAffordanceKeypoint,
        VqaFamily::GripperDetection,
        VqaFamily::PlaceAffordance,
        VqaFamily::TraceChoice,
        VqaFamily::TraceDirectionChoice,
        VqaFamily::TraceLangChoice,
        VqaFamily::PastMultiTaskSelection,
        VqaFamily::FutureMultiTaskSelection,
        VqaFamily::PastPrimitiveSelection,
        VqaFamily::FuturePrimitiveSelection,
        VqaFamily::TemporalUnderstanding,
        VqaFamily::SuccessPositive,
        VqaFamily::SuccessNegative,
        VqaFamily::DiscriminativeAffordancePositive,
        VqaFamily::DiscriminativeAffordanceNegative,
        VqaFamily::TraceEasy,
        VqaFamily::TraceHard,
        VqaFamily::Planning,
        VqaFamily::PlanningWithContext,
        VqaFamily::PlanningRemainingSteps,
        VqaFamily::GenerativeAffordance,
        VqaFamily::FuturePrediction,
        VqaFamily::PastDescription,
    ];

    pub fn as_str(self) -> &'static str {
        use VqaFamily::*;
        match self {
            GroundingChoice => "grounding_choice",
            GraspPoseChoice => "grasp_pose_choice",
            SceneUnderstanding => "scene_understanding",
            ContactDecide => "contact_decide",
            GroundingGeneration => "grounding_generation",
            GraspAffordanceBox => "grasp_affordance_box",
            GraspAffordanceKeypoint => "grasp_affordance_keypoint",
            GripperDetection => "gripper_detection",
            PlaceAffordance => "place_affordance",
            TraceChoice => "trace_choice",
            TraceDirectionChoice => "trace_direction_choice",
            TraceLangChoice => "trace_lang_choice",
            PastMultiTaskSelection => "past_multi_task_selection",
            FutureMultiTaskSelection => "future_multi_task_selection",
            PastPrimitiveSelection => "past_primitive_selection",
            FuturePrimitiveSelection => "future_primitive_selection",
            TemporalUnderstanding => "temporal_understanding",
            SuccessPositive => "success_positive",
            SuccessNegative => "success_negative",
            DiscriminativeAffordancePositive => "discriminative_affordance_positive",
            DiscriminativeAffordanceNegative => "discriminative_affordance_negative",
            TraceEasy => "trace_easy",
            TraceHard => "trace_hard",
            Planning => "planning",
            PlanningWithContext => "planning_with_context",
            PlanningRemainingSteps => "planning_remaining_steps",
            GenerativeAffordance => "generative_affordance",
            FuturePrediction => "future_prediction",
            PastDescription => "past_description",
        }
    }

    pub fn axis(self) -> Axis {
        use VqaFamily::*;
        let domain = match self {
            GroundingChoice | GraspPoseChoice | SceneUnderstanding | ContactDecide | GroundingGeneration
            | GraspAffordanceBox | GraspAffordanceKeypoint | GripperDetection | PlaceAffordance => Domain::Spatial,
            _ => Domain::Temporal,
        };
        let ability = match self {
            GroundingGeneration | GraspAffordanceBox | GraspAffordanceKeypoint | GripperDetection | PlaceAffordance
            | TraceEasy | TraceHard | Planning | PlanningWithContext | PlanningRemainingSteps | GenerativeAffordance
            | FuturePrediction | PastDescription => Ability::Generation,
            _ => Ability::Understanding,
        };
        Axis { domain, ability }
    }

    /// How predictions for this family are scored.
    pub fn answer_kind(self) -> AnswerKind {
        use VqaFamily::*;
        match self {
            GroundingGeneration | GraspAffordanceBox | GripperDetection | PlaceAffordance => AnswerKind::Box,
            GraspAffordanceKeypoint | TraceEasy | TraceHard => AnswerKind::Points,
            Planning | PlanningWithContext | PlanningRemainingSteps | GenerativeAffordance | FuturePrediction
            | PastDescription => AnswerKind::Text,
            _ => AnswerKind::Label,
        }
    }
}

impl fmt::Display for VqaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown VQA family {0:?}")]
pub struct UnknownFamily(pub String);

impl FromStr for VqaFamily {
    type Err = UnknownFamily;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VqaFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerKind {
    Label,
    Box,
    Points,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Answer {
    /// A choice label, a color name, Yes/No, or a subtask text picked from the choices.
    Label(String),
    Box([i64; 4]),
    Points(Vec<[i64; 2]>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    /// Canonical content; pairwise distinct within an item.
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub episode_id: String,
    pub frame: usize,
    pub frame_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<OverlaySpec>,
    /// Rendered overlay image, relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub episode_id: String,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub item_id: String,
    pub family: VqaFamily,
    pub axis: Axis,
    pub template_index: usize,
    pub prompt: String,
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    pub answer: Answer,
    pub split: Split,
    pub provenance: Provenance,
}

impl VqaItem {
    /// Checks the choice invariants: labels and contents pairwise distinct,
    /// exactly one label equal to the answer.
    pub fn check_choices(&self) -> Result<(), String> {
        let Some(choices) = &self.choices else {
            return Ok(());
        };
        let Answer::Label(answer) = &self.answer else {
            return Err("choice item without a label answer".into());
        };
        let labels: BTreeSet<&str> = choices.iter().map(|c| c.label.as_str()).collect();
        let contents: BTreeSet<&str> = choices.iter().map(|c| c.content.as_str()).collect();
        if labels.len() != choices.len() || contents.len() != choices.len() {
            return Err("duplicate choices".into());
        }
        if choices.iter().filter(|c| &c.label == answer).count() != 1 {
            return Err(format!("answer {answer:?} not among the choices"));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VqaError {
    #[error("{family}: missing annotation {what}")]
    MissingAnnotation { family: VqaFamily, what: String },
    #[error("episode {0} appears in both splits")]
    Leakage(String),
}

/// An episode's scene as seen by other episodes' scene-understanding items.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub episode_id: String,
    pub description: String,
    pub frame_ref: String,
}

/// Corpus-level pools shared across episodes: task texts for mismatched
/// prompts and first frames for scene distractors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VqaContext {
    pub texts: BTreeMap<String, BTreeSet<String>>,
    pub scenes: Vec<SceneEntry>,
}

/// Every task text an episode carries: global, clip and subtask descriptions.
pub fn episode_texts(episode: &Episode) -> BTreeSet<String> {
    let ann = &episode.annotations;
    let mut out: BTreeSet<String> = ann.clips.iter().map(|c| c.description.clone()).collect();
    out.insert(ann.global_description.clone());
    if let Some(d) = &ann.derived {
        out.extend(d.subtask_texts.iter().cloned());
    }
    out
}

impl VqaContext {
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut ctx = VqaContext::default();
        for e in episodes {
            ctx.texts.insert(e.episode_id.clone(), episode_texts(e));
            ctx.scenes.push(SceneEntry {
                episode_id: e.episode_id.clone(),
                description: e.annotations.global_description.clone(),
                frame_ref: e.frame_ref(0),
            });
        }
        ctx.scenes.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
        ctx
    }

    /// Pool texts that belong to other episodes and not to `episode`.
    pub fn foreign_texts(&self, episode: &Episode) -> Vec<String> {
        let own = episode_texts(episode);
        let all: BTreeSet<&String> = self
            .texts
            .iter()
            .filter(|(id, _)| **id != episode.episode_id)
            .flat_map(|(_, t)| t)
            .collect();
        all.into_iter().filter(|t| !own.contains(*t)).cloned().collect()
    }

    /// Scenes of other episodes with a different global description.
    pub fn foreign_scenes(&self, episode: &Episode) -> Vec<&SceneEntry> {
        self.scenes
            .iter()
            .filter(|s| s.episode_id != episode.episode_id && s.description != episode.annotations.global_description)
            .collect()
    }
}

/// Tags every item Eval iff its episode is in `eval_ids`.
pub fn assign_split(mut items: Vec<VqaItem>, eval_ids: &BTreeSet<String>) -> Vec<VqaItem> {
    for it in &mut items {
        it.split = if eval_ids.contains(&it.provenance.episode_id) {
            Split::Eval
        } else {
            Split::Train
        };
    }
    items
}

/// Fails if any episode contributes items to both splits.
pub fn check_no_leakage(items: &[VqaItem]) -> Result<(), VqaError> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for it in items {
        let id = it.provenance.episode_id.as_str();
        match seen.get(id) {
            Some(s) if *s != it.split => return Err(VqaError::Leakage(id.to_string())),
            Some(_) => {}
            None => {
                seen.insert(id, it.split);
            }
        }
    }
    Ok(())
}

pub fn to_jsonl(items: &[VqaItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("VQA items serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<VqaItem>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_counts_per_domain() {
        let spatial = VqaFamily::ALL.iter().filter(|f| f.axis().domain == Domain::Spatial).count();
        assert_eq!(spatial, 9);
        assert_eq!(VqaFamily::ALL.len() - spatial, 20);
    }

    #[test]
    fn family_names_round_trip() {
        for f in VqaFamily::ALL {
            assert_eq!(f.as_str().parse::<VqaFamily>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.as_str()));
        }
        assert!("nope".parse::<VqaFamily>().is_err());
    }

    fn item(episode: &str) -> VqaItem {
        VqaItem {
            item_id: format!("{episode}:planning:c0"),
            family: VqaFamily::Planning,
            axis: VqaFamily::Planning.axis(),
            template_index: 0,
            prompt: String::new(),
            images: vec![],
            choices: None,
            answer: Answer::Text("x".into()),
            split: Split::Train,
            provenance: Provenance {
                episode_id: episode.into(),
                frames: vec![0],
            },
        }
    }

    #[test]
    fn split_follows_membership() {
        let items = vec![item("a"), item("b"), item("a")];
        let none = assign_split(items.clone(), &BTreeSet::new());
        assert!(none.iter().all(|i| i.split == Split::Train));
        let all: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(assign_split(items.clone(), &all).iter().all(|i| i.split == Split::Eval));
        let some: BTreeSet<String> = ["b".to_string()].into();
        let tagged = assign_split(items, &some);
        assert_eq!(
            tagged.iter().map(|i| i.split).collect::<Vec<_>>(),
            vec![Split::Train, Split::Eval, Split::Train]
        );
        check_no_leakage(&tagged).unwrap();
    }

    #[test]
    fn leakage_detected() {
        let mut items = vec![item("a"), item("a")];
        items[1].split = Split::Eval;
        assert_eq!(check_no_leakage(&items), Err(VqaError::Leakage("a".into())));
    }

    #[test]
    fn choice_invariant_checks() {
        let mut it = item("a");
        it.answer = Answer::Label("B".into());
        it.choices = Some(vec![
            Choice { label: "A".into(), content: "x".into() },
            Choice { label: "B".into(), content: "y".into() },
        ]);
        it.check_choices().unwrap();
        it.choices.as_mut().unwrap()[1].content = "x".into();
        assert!(it.check_choices().is_err());
        it.answer = Answer::Label("C".into());
        it.choices.as_mut().unwrap()[1].content = "y".into();
        assert!(it.check_choices().is_err());
    }
}
