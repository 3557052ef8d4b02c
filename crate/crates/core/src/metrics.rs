//! Prediction scoring: open-loop score over action chunks, DTW over traces,
//! box IoU, averaged BLEU and choice accuracy.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::Rect;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no inputs")]
    Empty,
    #[error("empty trace")]
    EmptyTrace,
    #[error("degenerate rectangle {0:?}")]
    DegenerateRect([f64; 4]),
    #[error("no reference texts")]
    EmptyReference,
    #[error("{preds} predictions for {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

/// A `T x D` block of actions, one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub steps: Vec<Vec<f64>>,
}

impl ActionChunk {
    pub fn new(steps: Vec<Vec<f64>>) -> Self {
        Self { steps }
    }

    /// `(T, D)`, or an error when rows differ in length.
    pub fn shape(&self) -> Result<(usize, usize), MetricError> {
        let d = self.steps.first().map_or(0, Vec::len);
        if self.steps.iter().any(|r| r.len() != d) {
            return Err(MetricError::Shape("ragged action chunk".into()));
        }
        Ok((self.steps.len(), d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OlsAggregate {
    /// Fraction of all `T * D` entries under the threshold.
    #[default]
    EntryMean,
    /// Fraction of steps whose every dimension is under the threshold.
    AllDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsConfig {
    pub tau: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub aggregate: OlsAggregate,
}

fn default_theta() -> f64 {
    1.0
}

impl OlsConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            theta: 1.0,
            aggregate: OlsAggregate::EntryMean,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.tau > 0.0) {
            return Err(MetricError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(MetricError::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

fn chunk_fraction(pred: &ActionChunk, truth: &ActionChunk, cfg: &OlsConfig) -> Result<f64, MetricError> {
    let shape = truth.shape()?;
    if pred.shape()? != shape {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", pred.shape()?, shape)));
    }
    let (t, d) = shape;
    if t == 0 || d == 0 {
        return Err(MetricError::Shape("empty action chunk".into()));
    }
    let ok = |p: f64, a: f64| (p - a).abs() < cfg.tau;
    let rows = pred.steps.iter().zip(&truth.steps);
    Ok(match cfg.aggregate {
        OlsAggregate::EntryMean => {
            let hits: usize = rows.map(|(p, a)| p.iter().zip(a).filter(|(p, a)| ok(**p, **a)).count()).sum();
            hits as f64 / (t * d) as f64
        }
        OlsAggregate::AllDims => {
            let hits = rows.filter(|(p, a)| p.iter().zip(a.iter()).all(|(p, a)| ok(*p, *a))).count();
            hits as f64 / t as f64
        }
    })
}

/// Fraction of `(prediction, truth)` chunks whose under-threshold fraction
/// reaches `theta`.
pub fn ols(pairs: &[(ActionChunk, ActionChunk)], cfg: &OlsConfig) -> Result<f64, MetricError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut pass = 0usize;
    for (p, a) in pairs {
        if chunk_fraction(p, a, cfg)? >= cfg.theta {
            pass += 1;
        }
    }
    Ok(pass as f64 / pairs.len() as f64)
}

pub const OLS_THRESHOLDS: [f64; 4] = [0.1, 0.05, 0.03, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsRow {
    pub tau: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsTable {
    pub rows: Vec<OlsRow>,
    /// Mean over the rows.
    pub mols: f64,
}

impl OlsTable {
    /// Header and value cells in table order, scores as percentages.
    pub fn cells(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .rows
            .iter()
            .map(|r| (format!("OLS@{}", r.tau), format!("{:.2}", r.score * 100.0)))
            .collect();
        out.push(("mOLS".into(), format!("{:.2}", self.mols * 100.0)));
        out
    }
}

/// OLS at each standard threshold, with `theta` and aggregation from `base`.
pub fn ols_table(pairs: &[(ActionChunk, ActionChunk)], base: &OlsConfig) -> Result<OlsTable, MetricError> {
    let rows = OLS_THRESHOLDS
        .iter()
        .map(|&tau| {
            let cfg = OlsConfig { tau, ..base.clone() };
            ols(pairs, &cfg).map(|score| OlsRow { tau, score })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mols = rows.iter().map(|r| r.score).sum::<f64>() / rows.len() as f64;
    Ok(OlsTable { rows, mols })
}

/// Dynamic time warping with Euclidean point cost and no window.
pub fn dtw(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyTrace);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in a {
        cur[0] = f64::INFINITY;
        for (j, q) in b.iter().enumerate() {
            let cost = (p[0] - q[0]).hypot(p[1] - q[1]);
            cur[j + 1] = cost + prev[j].min(prev[j + 1]).min(cur[j]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

fn checked(r: &Rect) -> Result<(), MetricError> {
    if r.validate().is_err() {
        return Err(MetricError::DegenerateRect([r.x1, r.y1, r.x2, r.y2]));
    }
    Ok(())
}

pub fn iou(a: &Rect, b: &Rect) -> Result<f64, MetricError> {
    checked(a)?;
    checked(b)?;
    Ok(a.iou(b))
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;

/// Fraction of pairs with IoU strictly above `threshold`.
pub fn acc_at_iou(preds: &[Rect], truths: &[Rect], threshold: f64) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut hits = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if iou(p, t)? > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Lowercased, punctuation removed, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate total for order `n`.
fn ngram_match(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs: Vec<HashMap<&[String], usize>> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Per-order precisions: unigram unsmoothed, higher orders add-one smoothed.
pub fn bleu_precisions(candidate: &[String], references: &[Vec<String>]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for (i, slot) in p.iter_mut().enumerate() {
        let n = i + 1;
        let (m, t) = ngram_match(candidate, references, n);
        *slot = if n == 1 {
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
    }
    p
}

pub fn brevity_penalty(candidate_len: usize, references: &[Vec<String>]) -> f64 {
    if candidate_len == 0 {
        return 0.0;
    }
    let c = candidate_len as f64;
    let r = references
        .iter()
        .map(|t| t.len())
        .min_by_key(|&l| ((l as i64 - candidate_len as i64).abs(), l))
        .unwrap_or(0) as f64;
    if c >= r {
        1.0
    } else {
        (1.0 - r / c).exp()
    }
}

/// Mean of cumulative BLEU-1..4, scaled to 0-100.
pub fn bleu_avg(candidate: &str, references: &[&str]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let p = bleu_precisions(&cand, &refs);
    let bp = brevity_penalty(cand.len(), &refs);
    let mut total = 0.0;
    for n in 1..=4 {
        let logs = &p[..n];
        let score = if logs.iter().any(|&x| x <= 0.0) {
            0.0
        } else {
            bp * (logs.iter().map(|x| x.ln()).sum::<f64>() / n as f64).exp()
        };
        total += score;
    }
    Ok(100.0 * total / 4.0)
}

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\(([a-d])\)|([a-d])(?:[.):]|$))(?:\s.*)?$").unwrap())
}

/// Trim, case-fold, drop a trailing period, and reduce a leading choice
/// letter (`A`, `(A)`, `A.`, `A)`, `A:`, optionally followed by text) to
/// the letter.
pub fn canonicalize_label(label: &str) -> String {
    let s = label.trim().to_lowercase();
    let s = s.strip_suffix('.').unwrap_or(&s).trim_end().to_string();
    match letter_re().captures(&s) {
        Some(c) => c.get(1).or_else(|| c.get(2)).unwrap().as_str().to_string(),
        None => s,
    }
}

pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], truths: &[T]) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| canonicalize_label(p.as_ref()) == canonicalize_label(t.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chunk(rows: &[&[f64]]) -> ActionChunk {
        ActionChunk::new(rows.iter().map(|r| r.to_vec()).collect())
    }

    #[test]
    fn ols_worked_example() {
        let truth = chunk(&[&[0.0], &[0.0], &[0.0]]);
        let pairs = vec![
            (chunk(&[&[0.01], &[0.01], &[0.01]]), truth.clone()),
            (chunk(&[&[0.01], &[0.01], &[0.10]]), truth),
        ];
        assert_eq!(ols(&pairs, &OlsConfig::new(0.05)).unwrap(), 0.5);
    }

    #[test]
    fn ols_perfect_and_hopeless() {
        let a = chunk(&[&[0.3, 0.1], &[0.2, 0.0]]);
        let pairs = vec![(a.clone(), a.clone())];
        let t = ols_table(&pairs, &OlsConfig::new(0.1)).unwrap();
        assert!(t.rows.iter().all(|r| r.score == 1.0));
        assert_eq!(t.mols, 1.0);
        let far = chunk(&[&[1.3, 1.1], &[1.2, 1.0]]);
        assert_eq!(ols(&[(far, a)], &OlsConfig::new(0.1)).unwrap(), 0.0);
    }

    #[test]
    fn ols_aggregation_modes_differ() {
        let truth = chunk(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let pred = chunk(&[&[0.0, 0.5], &[0.0, 0.0]]);
        let mut cfg = OlsConfig::new(0.1);
        cfg.theta = 0.75;
        assert_eq!(ols(&[(pred.clone(), truth.clone())], &cfg).unwrap(), 1.0);
        cfg.aggregate = OlsAggregate::AllDims;
        assert_eq!(ols(&[(pred, truth)], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn ols_errors() {
        let a = chunk(&[&[0.0]]);
        let b = chunk(&[&[0.0, 1.0]]);
        assert_eq!(ols(&[], &OlsConfig::new(0.1)), Err(MetricError::Empty));
        assert!(matches!(ols(&[(a.clone(), b)], &OlsConfig::new(0.1)), Err(MetricError::Shape(_))));
        assert!(matches!(ols(&[(a.clone(), a)], &OlsConfig::new(0.0)), Err(MetricError::Config(_))));
    }

    #[test]
    fn table_cells_follow_threshold_order() {
        let a = chunk(&[&[0.0]]);
        let cells = ols_table(&[(a.clone(), a)], &OlsConfig::new(0.1)).unwrap().cells();
        let heads: Vec<&str> = cells.iter().map(|(h, _)| h.as_str()).collect();
        assert_eq!(heads, ["OLS@0.1", "OLS@0.05", "OLS@0.03", "OLS@0.01", "mOLS"]);
    }

    #[test]
    fn dtw_basics() {
        assert_eq!(dtw(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap(), 5.0);
        let a = [[0.0, 0.0], [1.0, 2.0], [4.0, 4.0]];
        assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        assert_eq!(dtw(&[], &a), Err(MetricError::EmptyTrace));
        // repeated points align for free
        assert_eq!(dtw(&a, &[[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [4.0, 4.0]]).unwrap(), 0.0);
    }

    #[test]
    fn iou_closed_form() {
        let v = iou(&Rect::new(0.0, 0.0, 10.0, 10.0), &Rect::new(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&Rect::new(0.0, 0.0, 1.0, 1.0), &Rect::new(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        assert!(matches!(
            iou(&Rect::new(5.0, 0.0, 1.0, 1.0), &Rect::new(0.0, 0.0, 1.0, 1.0)),
            Err(MetricError::DegenerateRect(_))
        ));
    }

    #[test]
    fn acc_at_iou_is_strict() {
        let t = Rect::new(0.0, 0.0, 10.0, 10.0);
        // IoU exactly 0.1: 10 / 100
        let p = Rect::new(0.0, 0.0, 10.0, 1.0);
        assert_eq!(acc_at_iou(&[p], &[t], 0.1).unwrap(), 0.0);
        assert_eq!(acc_at_iou(&[t, p], &[t, t], 0.1).unwrap(), 0.5);
        assert!(matches!(acc_at_iou(&[t], &[], 0.1), Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = "Pick up the red cup, then place it on the shelf.";
        assert!((bleu_avg(c, &[c]).unwrap() - 100.0).abs() < 1e-9);
        assert!((bleu_avg("go", &["go"]).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu_avg("alpha beta gamma", &["delta epsilon zeta"]).unwrap(), 0.0);
        assert_eq!(bleu_avg("x", &[]), Err(MetricError::EmptyReference));
    }

    #[test]
    fn bleu_hand_computed() {
        // candidate "the cat sat on mat" vs reference "the cat sat on the mat"
        // p1 = 5/5, p2 = (3+1)/(4+1), p3 = (2+1)/(3+1), p4 = (1+1)/(2+1)
        // BP = exp(1 - 6/5)
        let bp = (1.0f64 - 6.0 / 5.0).exp();
        let p = [1.0, 0.8, 0.75, 2.0 / 3.0];
        let mut expected = 0.0;
        for n in 1..=4 {
            expected += bp * (p[..n].iter().map(|x: &f64| x.ln()).sum::<f64>() / n as f64).exp();
        }
        expected *= 25.0;
        let got = bleu_avg("The cat sat on mat", &["the cat sat on the mat"]).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("Pick up; the CUP!"), vec!["pick", "up", "the", "cup"]);
        assert_eq!(tokenize("gripper’s  path"), vec!["grippers", "path"]);
    }

    #[test]
    fn canonical_labels() {
        for (raw, want) in [
            ("A. pick up the cup", "a"),
            ("(b)", "b"),
            ("C)", "c"),
            (" d: open drawer", "d"),
            ("A", "a"),
            ("Yes.", "yes"),
            ("a cup", "a cup"),
            ("Blue", "blue"),
        ] {
            assert_eq!(canonicalize_label(raw), want, "{raw}");
        }
        assert_eq!(accuracy(&["A. pick up the cup"], &["A"]).unwrap(), 1.0);
        assert!(matches!(accuracy(&["A"], &["A", "B"]), Err(MetricError::LengthMismatch { .. })));
    }

    fn arb_chunks() -> impl Strategy<Value = Vec<(ActionChunk, ActionChunk)>> {
        (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(m, t, d)| {
            prop::collection::vec(
                (
                    prop::collection::vec(prop::collection::vec(-0.2f64..0.2, d), t),
                    prop::collection::vec(prop::collection::vec(-0.2f64..0.2, d), t),
                )
                    .prop_map(|(a, b)| (ActionChunk::new(a), ActionChunk::new(b))),
                m,
            )
        })
    }

    proptest! {
        #[test]
        fn ols_monotone(pairs in arb_chunks(), t1 in 0.001f64..0.3, t2 in 0.001f64..0.3, h1 in 0.0f64..=1.0, h2 in 0.0f64..=1.0) {
            let (lo_t, hi_t) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (lo_h, hi_h) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            let at = |tau, theta| ols(&pairs, &OlsConfig { tau, theta, aggregate: OlsAggregate::EntryMean }).unwrap();
            prop_assert!(at(lo_t, lo_h) <= at(hi_t, lo_h));
            prop_assert!(at(lo_t, hi_h) <= at(lo_t, lo_h));
        }

        #[test]
        fn ols_permutation_invariant(pairs in arb_chunks(), tau in 0.01f64..0.3) {
            let mut rev = pairs.clone();
            rev.reverse();
            let cfg = OlsConfig::new(tau);
            prop_assert_eq!(ols(&pairs, &cfg).unwrap(), ols(&rev, &cfg).unwrap());
        }

        #[test]
        fn dtw_symmetric(a in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..8), b in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..8)) {
            let a: Vec<[f64; 2]> = a.into_iter().map(|(x, y)| [x, y]).collect();
            let b: Vec<[f64; 2]> = b.into_iter().map(|(x, y)| [x, y]).collect();
            prop_assert!((dtw(&a, &b).unwrap() - dtw(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn iou_bounds(x in 0.0f64..50.0, y in 0.0f64..50.0, w in 0.5f64..30.0, h in 0.5f64..30.0,
                      u in 0.0f64..50.0, v in 0.0f64..50.0, p in 0.5f64..30.0, q in 0.5f64..30.0) {
            let a = Rect::new(x, y, x + w, y + h);
            let b = Rect::new(u, v, u + p, v + q);
            let ab = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn bleu_self_is_perfect(words in prop::collection::vec("[a-z]{1,6}", 1..12), other in "[a-z ]{0,20}") {
            let c = words.join(" ");
            prop_assert!((bleu_avg(&c, &[&other, &c]).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
