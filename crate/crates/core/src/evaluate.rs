//! Scoring of model predictions against generated VQA items and of action
//! chunks against recorded actions.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::Rect;
use crate::metrics::{accuracy, bleu_avg, dtw, iou, ols_table, ActionChunk, MetricError, OlsConfig, OlsTable, DEFAULT_IOU_THRESHOLD};
use crate::vqa::{Answer, AnswerKind, VqaFamily, VqaItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub id: String,
    pub steps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Accuracy,
    AccAtIou,
    Dtw,
    Bleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub metric: MetricName,
    pub score: f64,
    pub count: usize,
    /// Items without a prediction; scored as wrong, or skipped for DTW.
    pub missing: usize,
    /// Predictions that could not be parsed into the answer's form.
    pub unparsed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub families: BTreeMap<String, FamilyScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ols: Option<OlsTable>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no truth items for {0}")]
    NoItems(String),
    #[error("prediction for unknown id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

fn numbers(text: &str) -> Vec<f64> {
    number_re().find_iter(text).filter_map(|m| m.as_str().parse().ok()).collect()
}

/// First four numbers as `[x1, y1, x2, y2]`.
pub fn parse_box(text: &str) -> Option<Rect> {
    let n = numbers(text);
    (n.len() >= 4).then(|| Rect::new(n[0], n[1], n[2], n[3])).filter(|r| r.validate().is_ok())
}

/// Consecutive number pairs as points.
pub fn parse_points(text: &str) -> Option<Vec<[f64; 2]>> {
    let n = numbers(text);
    (n.len() >= 2 && n.len() % 2 == 0).then(|| n.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn truth_text(a: &Answer) -> String {
    match a {
        Answer::Label(s) | Answer::Text(s) => s.clone(),
        Answer::Box(b) => format!("{b:?}"),
        Answer::Points(p) => format!("{p:?}"),
    }
}

fn score_family(family: VqaFamily, items: &[&VqaItem], preds: &HashMap<&str, &str>) -> Result<FamilyScore, EvalError> {
    let kind = family.answer_kind();
    let mut missing = 0;
    let mut unparsed = 0;
    let mut values = Vec::new();
    let mut labels: (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
    for it in items {
        let pred = preds.get(it.item_id.as_str()).copied();
        if pred.is_none() {
            missing += 1;
        }
        match (kind, &it.answer) {
            (AnswerKind::Box, Answer::Box(t)) => {
                let truth = Rect::new(t[0] as f64, t[1] as f64, t[2] as f64, t[3] as f64);
                let hit = match pred.map(parse_box) {
                    Some(Some(p)) => iou(&p, &truth)? > DEFAULT_IOU_THRESHOLD,
                    Some(None) => {
                        unparsed += 1;
                        false
                    }
                    None => false,
                };
                values.push(if hit { 1.0 } else { 0.0 });
            }
            (AnswerKind::Points, Answer::Points(t)) => {
                let truth: Vec<[f64; 2]> = t.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
                match pred.map(parse_points) {
                    Some(Some(p)) => values.push(dtw(&p, &truth)?),
                    Some(None) => unparsed += 1,
                    None => {}
                }
            }
            (AnswerKind::Text, Answer::Text(t)) => {
                values.push(pred.map_or(Ok(0.0), |p| bleu_avg(p, &[t.as_str()]))?);
            }
            (_, answer) => {
                labels.0.push(pred.unwrap_or("").to_string());
                labels.1.push(truth_text(answer));
            }
        }
    }
    let (metric, score) = match kind {
        AnswerKind::Label => (MetricName::Accuracy, accuracy(&labels.0, &labels.1)?),
        AnswerKind::Box => (MetricName::AccAtIou, mean(&values)),
        AnswerKind::Points => (MetricName::Dtw, mean(&values)),
        AnswerKind::Text => (MetricName::Bleu, mean(&values)),
    };
    Ok(FamilyScore {
        metric,
        score,
        count: items.len(),
        missing,
        unparsed,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores every family present in `truth`, or only `family` when given.
pub fn score_predictions(truth: &[VqaItem], preds: &[Prediction], family: Option<VqaFamily>) -> Result<EvalReport, EvalError> {
    let ids: HashMap<&str, VqaFamily> = truth.iter().map(|i| (i.item_id.as_str(), i.family)).collect();
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for p in preds {
        if !ids.contains_key(p.item_id.as_str()) {
            return Err(EvalError::UnknownId(p.item_id.clone()));
        }
        by_id.insert(p.item_id.as_str(), p.prediction.as_str());
    }
    let mut groups: BTreeMap<VqaFamily, Vec<&VqaItem>> = BTreeMap::new();
    for it in truth.iter().filter(|i| family.is_none_or(|f| f == i.family)) {
        groups.entry(it.family).or_default().push(it);
    }
    if groups.is_empty() {
        return Err(EvalError::NoItems(family.map_or("any family".into(), |f| f.to_string())));
    }
    let mut report = EvalReport::default();
    for (f, items) in groups {
        report.families.insert(f.to_string(), score_family(f, &items, &by_id)?);
    }
    Ok(report)
}

/// OLS table over chunks paired by id; unmatched truth ids are an error.
pub fn score_chunks(truth: &[ChunkRecord], preds: &[ChunkRecord], base: &OlsConfig) -> Result<OlsTable, EvalError> {
    let by_id: HashMap<&str, &ChunkRecord> = preds.iter().map(|c| (c.id.as_str(), c)).collect();
    let pairs = truth
        .iter()
        .map(|t| {
            by_id
                .get(t.id.as_str())
                .map(|p| (ActionChunk::new(p.steps.clone()), ActionChunk::new(t.steps.clone())))
                .ok_or_else(|| EvalError::UnknownId(t.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ols_table(&pairs, base)?)
}
