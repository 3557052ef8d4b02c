//! Stage driver: ingest → calibrate → correct → derive → genvqa → evaluate.
//!
//! Each stage reads the previous stage's episodes (or `<input>/episodes`
//! when it is the first stage of the plan) and writes
//! `<output>/<stage>/episodes`. Side inputs live in the input root.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use demokit_core::calibration::{calibrate_offset, CalibrationResult, CalibrationSample, Observation};
use demokit_core::config::{Config, ConfigError};
use demokit_core::correction::{spatial_correct, temporal_correct, CorrectionError, SpatialCorrection, TemporalCorrection};
use demokit_core::derive::{project_episode, with_derived};
use demokit_core::episode::Episode;
use demokit_core::evaluate::{score_chunks, score_predictions, ChunkRecord, EvalReport, Prediction};
use demokit_core::kinematics::RobotRegistry;
use demokit_core::metrics::OlsConfig;
use demokit_core::vqa::{assign_split, check_no_leakage, generate_items, to_jsonl, VqaContext, VqaItem};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, EPISODES_DIR};
use crate::render::render_item_overlays;

pub const CALIBRATION_SAMPLES: &str = "calibration_samples.json";
pub const VIDEO_ONSETS: &str = "video_onsets.json";
pub const EVAL_IDS: &str = "eval_ids.txt";
pub const ITEMS: &str = "items.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const CHUNKS_TRUTH: &str = "chunks_truth.jsonl";
pub const CHUNKS_PRED: &str = "chunks_pred.jsonl";
pub const FRAMES_DIR: &str = "frames";
pub const REPORT: &str = "report.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage order violation: {0}")]
    Dependency(String),
    #[error("config: {0}")]
    Settings(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Stage(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Dependency(_) | PipelineError::Settings(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Calibrate,
    Correct,
    Derive,
    #[serde(rename = "genvqa")]
    GenVqa,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Calibrate,
        Stage::Correct,
        Stage::Derive,
        Stage::GenVqa,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Calibrate => "calibrate",
            Stage::Correct => "correct",
            Stage::Derive => "derive",
            Stage::GenVqa => "genvqa",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub stages: Vec<Stage>,
    pub config: Option<PathBuf>,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Overrides `pipeline.seed` from the config.
    pub seed: Option<u64>,
    /// Overrides `pipeline.jobs` from the config.
    pub jobs: Option<usize>,
}

impl RunPlan {
    pub fn full(input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunPlan {
            stages: Stage::ALL.to_vec(),
            config: None,
            input: input.into(),
            output: output.into(),
            seed: None,
            jobs: None,
        }
    }

    /// Stages must appear at most once and in pipeline order.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::Dependency("no stages".into()));
        }
        for w in self.stages.windows(2) {
            if w[0] >= w[1] {
                return Err(PipelineError::Dependency(format!("{} cannot run after {}", w[1], w[0])));
            }
        }
        Ok(())
    }

    pub fn effective_config(&self) -> Result<Config, PipelineError> {
        let mut config = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            config.pipeline.seed = s;
        }
        if let Some(j) = self.jobs {
            config.pipeline.jobs = j;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub ok: usize,
    pub failed: usize,
    pub failures: Vec<EpisodeFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    /// SHA-256 of every artifact written, keyed by path under the output root.
    pub artifacts: BTreeMap<String, String>,
}

impl RunReport {
    pub fn has_failures(&self) -> bool {
        self.stages.iter().any(|s| s.failed > 0)
    }

    pub fn exit_code(&self) -> i32 {
        if self.has_failures() {
            2
        } else {
            0
        }
    }
}

/// Per-robot calibration outcome as written to `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotCalibration {
    pub offset: [f64; 3],
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CalibrationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalCorrection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial: Option<SpatialCorrection>,
    /// Why spatial correction could not be evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_skipped: Option<String>,
}

/// Episodes that made it through a stage plus its report.
pub struct StageOutput {
    pub episodes: Vec<Episode>,
    pub report: StageReport,
}

fn report(stage: Stage, ok: usize, failures: Vec<EpisodeFailure>, notes: Vec<String>) -> StageReport {
    StageReport {
        stage,
        ok,
        failed: failures.len(),
        failures,
        notes,
    }
}

/// Applies `f` to every episode in parallel, keeping input order.
fn per_episode<T: Send>(
    episodes: &[Episode],
    f: impl Fn(&Episode) -> Result<T, String> + Sync,
) -> (Vec<T>, Vec<EpisodeFailure>) {
    let results: Vec<Result<T, EpisodeFailure>> = episodes
        .par_iter()
        .map(|e| {
            f(e).map_err(|error| EpisodeFailure {
                episode_id: e.episode_id.clone(),
                error,
            })
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push(e),
        }
    }
    (ok, failed)
}

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, PipelineError> {
    if path.exists() {
        io::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Validates manifests and rewrites them canonically.
pub fn ingest(episodes: Vec<Episode>, failures: Vec<EpisodeFailure>) -> StageOutput {
    let ok = episodes.len();
    StageOutput {
        episodes,
        report: report(Stage::Ingest, ok, failures, vec![]),
    }
}

/// Fits one end-effector offset per robot from the samples, then projects
/// every episode with its robot's offset.
pub fn calibrate(
    episodes: Vec<Episode>,
    samples: &[CalibrationSample],
    config: &Config,
    registry: &RobotRegistry,
) -> (StageOutput, BTreeMap<String, RobotCalibration>) {
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let robots: BTreeSet<&str> = episodes.iter().map(|e| e.robot_id.as_str()).collect();
    let mut notes = Vec::new();
    let mut table = BTreeMap::new();
    for robot in robots {
        let mut obs = Vec::new();
        let mut camera = None;
        for s in samples {
            let Some(e) = by_id.get(s.episode_id.as_str()).filter(|e| e.robot_id == robot) else { continue };
            let Some(record) = e.frames.get(s.frame) else {
                notes.push(format!("sample {}@{} is out of range; ignored", s.episode_id, s.frame));
                continue;
            };
            // one camera per robot rig; samples from other rigs are not mixed in
            if *camera.get_or_insert(&e.camera) != &e.camera {
                notes.push(format!("sample {}@{} uses a different camera; ignored", s.episode_id, s.frame));
                continue;
            }
            obs.push(Observation {
                sample: s.clone(),
                record: record.clone(),
            });
        }
        let entry = match (camera, registry.get(robot)) {
            (None, _) => {
                notes.push(format!("robot {robot}: no calibration samples, zero offset"));
                RobotCalibration {
                    offset: [0.0; 3],
                    samples: 0,
                    result: None,
                    error: None,
                }
            }
            (Some(_), Err(e)) => RobotCalibration {
                offset: [0.0; 3],
                samples: obs.len(),
                result: None,
                error: Some(e.to_string()),
            },
            (Some(cam), Ok(model)) => match calibrate_offset(model, cam, &obs, &config.calibration) {
                Ok(r) => RobotCalibration {
                    offset: r.offset,
                    samples: obs.len(),
                    result: Some(r),
                    error: None,
                },
                Err(e) => RobotCalibration {
                    offset: [0.0; 3],
                    samples: obs.len(),
                    result: None,
                    error: Some(e.to_string()),
                },
            },
        };
        table.insert(robot.to_string(), entry);
    }
    let (projected, failures) = per_episode(&episodes, |e| {
        let cal = &table[&e.robot_id];
        if let Some(err) = &cal.error {
            return Err(format!("calibration of robot {} failed: {err}", e.robot_id));
        }
        let model = registry.get(&e.robot_id).map_err(|err| err.to_string())?;
        project_episode(e, model, &Vector3::from(cal.offset)).map_err(|err| err.to_string())
    });
    let ok = projected.len();
    (
        StageOutput {
            episodes: projected,
            report: report(Stage::Calibrate, ok, failures, notes),
        },
        table,
    )
}

/// Temporal alignment where a video onset is known, then spatial correction.
pub fn correct(
    episodes: Vec<Episode>,
    onsets: &BTreeMap<String, usize>,
    config: &Config,
) -> (StageOutput, BTreeMap<String, CorrectionRecord>) {
    let c = &config.correction;
    let (done, failures) = per_episode(&episodes, |e| {
        let mut rec = CorrectionRecord::default();
        let mut ep = e.clone();
        if let Some(&onset) = onsets.get(&e.episode_id) {
            let (out, t) = temporal_correct(&ep, onset, c.speed_threshold).map_err(|err| err.to_string())?;
            ep = out;
            rec.temporal = Some(t);
        }
        match spatial_correct(&ep, c.iou_threshold, c.aspect_limit) {
            Ok((out, s)) => {
                ep = out;
                rec.spatial = Some(s);
            }
            Err(CorrectionError::MissingAnnotation(what)) => rec.spatial_skipped = Some(format!("missing {what}")),
            Err(err) => return Err(err.to_string()),
        }
        Ok((ep, rec))
    });
    let mut records = BTreeMap::new();
    let mut out = Vec::with_capacity(done.len());
    for (ep, rec) in done {
        records.insert(ep.episode_id.clone(), rec);
        out.push(ep);
    }
    let ok = out.len();
    (
        StageOutput {
            episodes: out,
            report: report(Stage::Correct, ok, failures, vec![]),
        },
        records,
    )
}

pub fn derive(episodes: Vec<Episode>, config: &Config) -> StageOutput {
    let (out, failures) = per_episode(&episodes, |e| with_derived(e, &config.derive).map_err(|err| err.to_string()));
    let ok = out.len();
    StageOutput {
        episodes: out,
        report: report(Stage::Derive, ok, failures, vec![]),
    }
}

/// Held-out episode ids: a seeded sample of `fraction` of the sorted ids.
pub fn choose_eval_ids(ids: &[String], fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let k = ((sorted.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E7A1);
    rand::seq::index::sample(&mut rng, sorted.len(), k.min(sorted.len()))
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect()
}

/// Generated items in episode order; the context for each episode is built
/// from its own split only, so no text or image crosses splits.
pub fn genvqa(
    episodes: &[Episode],
    eval_ids: &BTreeSet<String>,
    config: &Config,
    render: Option<(&Path, &Path)>,
) -> Result<(Vec<VqaItem>, StageReport), PipelineError> {
    let families = config.vqa.family_set();
    let seed = config.pipeline.seed;
    let eval_ctx = VqaContext::from_episodes(episodes.iter().filter(|e| eval_ids.contains(&e.episode_id)));
    let train_ctx = VqaContext::from_episodes(episodes.iter().filter(|e| !eval_ids.contains(&e.episode_id)));
    let (per_ep, failures) = per_episode(episodes, |e| {
        let ctx = if eval_ids.contains(&e.episode_id) { &eval_ctx } else { &train_ctx };
        let mut items = generate_items(e, &families, seed, ctx).map_err(|err| err.to_string())?;
        if let Some((frames_root, out_dir)) = render {
            for it in &mut items {
                render_item_overlays(it, (e.camera.width, e.camera.height), frames_root, out_dir).map_err(|err| err.to_string())?;
            }
        }
        Ok(items)
    });
    let ok = per_ep.len();
    let items = assign_split(per_ep.into_iter().flatten().collect(), eval_ids);
    check_no_leakage(&items).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let notes = vec![format!(
        "{} items, {} eval episodes",
        items.len(),
        episodes.iter().filter(|e| eval_ids.contains(&e.episode_id)).count()
    )];
    Ok((items, report(Stage::GenVqa, ok, failures, notes)))
}

/// Scores predictions and action chunks found in the input root.
pub fn evaluate(items: &[VqaItem], input: &Path, config: &Config) -> Result<(Option<EvalReport>, StageReport), PipelineError> {
    let mut notes = Vec::new();
    let pred_path = input.join(PREDICTIONS);
    let mut eval: Option<EvalReport> = None;
    if pred_path.exists() {
        let preds: Vec<Prediction> = io::read_jsonl(&pred_path)?;
        eval = Some(score_predictions(items, &preds, None).map_err(|e| PipelineError::Input(e.to_string()))?);
    } else {
        notes.push(format!("no {PREDICTIONS}; VQA scoring skipped"));
    }
    let (ct, cp) = (input.join(CHUNKS_TRUTH), input.join(CHUNKS_PRED));
    if ct.exists() && cp.exists() {
        let truth: Vec<ChunkRecord> = io::read_jsonl(&ct)?;
        let preds: Vec<ChunkRecord> = io::read_jsonl(&cp)?;
        let base = OlsConfig {
            tau: 0.0,
            theta: config.metrics.theta,
            aggregate: config.metrics.aggregate,
        };
        let table = score_chunks(&truth, &preds, &base).map_err(|e| PipelineError::Input(e.to_string()))?;
        eval.get_or_insert_with(EvalReport::default).ols = Some(table);
    }
    let scored: BTreeSet<&str> = items.iter().map(|i| i.provenance.episode_id.as_str()).collect();
    let ok = if eval.is_some() { scored.len() } else { 0 };
    Ok((eval, report(Stage::Evaluate, ok, vec![], notes)))
}

fn registry_for(config: &Config) -> Result<RobotRegistry, PipelineError> {
    match &config.pipeline.robots_dir {
        Some(d) => RobotRegistry::with_dir(Path::new(d)).map_err(|e| {
            PipelineError::Config(ConfigError::Value {
                field: "pipeline.robots_dir".into(),
                message: e.to_string(),
            })
        }),
        None => Ok(RobotRegistry::builtin()),
    }
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Stage(e.to_string()))
}

/// Runs the plan and writes `<output>/report.json`.
pub fn run(plan: &RunPlan) -> Result<RunReport, PipelineError> {
    plan.validate()?;
    let config = plan.effective_config()?;
    let registry = registry_for(&config)?;
    let pool = thread_pool(config.pipeline.jobs)?;
    let report = pool.install(|| run_stages(plan, &config, &registry))?;
    io::write_json(&plan.output.join(REPORT), &report)?;
    Ok(report)
}

fn run_stages(plan: &RunPlan, config: &Config, registry: &RobotRegistry) -> Result<RunReport, PipelineError> {
    let input = &plan.input;
    let mut current: Option<Vec<Episode>> = None;
    let mut items: Option<Vec<VqaItem>> = None;
    let mut stages = Vec::new();
    for &stage in &plan.stages {
        let dir = plan.output.join(stage.as_str());
        io::reset_dir(&dir)?;
        let (episodes, load_failures) = match current.take() {
            Some(eps) => (eps, vec![]),
            None if stage == Stage::Evaluate => (vec![], vec![]),
            None => io::load_dir(&input.join(EPISODES_DIR))?,
        };
        let mut out = match stage {
            Stage::Ingest => ingest(episodes, load_failures.clone()),
            Stage::Calibrate => {
                let samples: Vec<CalibrationSample> = optional(&input.join(CALIBRATION_SAMPLES))?.unwrap_or_default();
                let (out, table) = calibrate(episodes, &samples, config, registry);
                io::write_json(&dir.join("calibration.json"), &table)?;
                out
            }
            Stage::Correct => {
                let onsets: BTreeMap<String, usize> = optional(&input.join(VIDEO_ONSETS))?.unwrap_or_default();
                let (out, records) = correct(episodes, &onsets, config);
                io::write_json(&dir.join("corrections.json"), &records)?;
                out
            }
            Stage::Derive => derive(episodes, config),
            Stage::GenVqa => {
                let ids_path = input.join(EVAL_IDS);
                let eval_ids: BTreeSet<String> = if ids_path.exists() {
                    io::read_id_list(&ids_path)?.into_iter().collect()
                } else {
                    let ids: Vec<String> = episodes.iter().map(|e| e.episode_id.clone()).collect();
                    choose_eval_ids(&ids, config.vqa.eval_fraction, config.pipeline.seed)
                };
                let frames_root = input.join(FRAMES_DIR);
                let render = config.vqa.render_overlays.then_some((frames_root.as_path(), dir.as_path()));
                let (generated, rep) = genvqa(&episodes, &eval_ids, config, render)?;
                std::fs::write(dir.join(ITEMS), to_jsonl(&generated)).map_err(|e| PipelineError::io(&dir, e))?;
                let ids_text: String = eval_ids.iter().map(|id| format!("{id}\n")).collect();
                std::fs::write(dir.join(EVAL_IDS), ids_text).map_err(|e| PipelineError::io(&dir, e))?;
                items = Some(generated);
                StageOutput { episodes, report: rep }
            }
            Stage::Evaluate => {
                let truth = match items.take() {
                    Some(i) => i,
                    None => {
                        let text = std::fs::read_to_string(input.join(ITEMS)).map_err(|e| PipelineError::io(&input.join(ITEMS), e))?;
                        demokit_core::vqa::from_jsonl(&text).map_err(|e| PipelineError::Input(format!("{ITEMS}: {e}")))?
                    }
                };
                let (eval, rep) = evaluate(&truth, input, config)?;
                if let Some(eval) = eval {
                    io::write_json(&dir.join("report.json"), &eval)?;
                }
                StageOutput { episodes: vec![], report: rep }
            }
        };
        if stage != Stage::Ingest && !load_failures.is_empty() {
            out.report.failed += load_failures.len();
            out.report.failures.splice(0..0, load_failures);
        }
        if !matches!(stage, Stage::GenVqa | Stage::Evaluate) {
            io::save_dir(&dir.join(EPISODES_DIR), &out.episodes)?;
        }
        log::info!("{stage}: ok {} failed {}", out.report.ok, out.report.failed);
        stages.push(out.report);
        current = Some(out.episodes);
    }
    let mut artifacts = BTreeMap::new();
    for stage in &plan.stages {
        for (k, v) in io::digest_tree(&plan.output.join(stage.as_str()))? {
            artifacts.insert(format!("{stage}/{k}"), v);
        }
    }
    Ok(RunReport {
        seed: config.pipeline.seed,
        config_hash: config.hash(),
        stages,
        artifacts,
    })
}
