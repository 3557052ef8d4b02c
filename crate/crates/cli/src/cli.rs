//! Command-line surface of the `demokit` binary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use demokit_core::calibration::CalibrationSample;
use demokit_core::config::Config;
use demokit_core::evaluate::{score_chunks, score_predictions, ChunkRecord, EvalReport, Prediction};
use demokit_core::kinematics::RobotRegistry;
use demokit_core::metrics::OlsConfig;
use demokit_core::vqa::{from_jsonl, to_jsonl, VqaFamily};

use crate::io::{self, EPISODES_DIR};
use crate::pipeline::{self, PipelineError, RunPlan, Stage, StageReport, FRAMES_DIR, ITEMS};
use crate::qc::{qc_sample, validity_of_dir};

#[derive(Debug, Parser)]
#[command(name = "demokit", version, about = "Robot demonstration curation and benchmarking toolkit")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate manifests and rewrite them canonically.
    Ingest {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-robot end-effector offsets from annotated keypoints.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// Calibration result JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write episodes projected with the fitted offsets here.
        #[arg(long)]
        projected: Option<PathBuf>,
    },
    /// Temporal and spatial correction of projected episodes.
    Correct {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        aspect_limit: Option<f64>,
        #[arg(long)]
        speed_threshold: Option<f64>,
        /// JSON object mapping episode id to video onset frame.
        #[arg(long)]
        video_onset_file: Option<PathBuf>,
    },
    /// Write the derived annotation block into each manifest.
    Derive {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate VQA items as JSONL plus overlay images.
    Genvqa {
        #[arg(long)]
        episodes: PathBuf,
        /// Output directory for items.jsonl and overlays.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated family names; default all.
        #[arg(long, value_delimiter = ',')]
        families: Vec<String>,
        /// File with one held-out episode id per line.
        #[arg(long)]
        eval_ids: Option<PathBuf>,
        /// Root of frame images referenced by items.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Score predictions against generated items and action chunks.
    Evaluate {
        /// Restrict scoring to one family.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        chunks_pred: Option<PathBuf>,
        #[arg(long)]
        chunks_truth: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sample subsets of a corpus and mark them pass/fail.
    Qc {
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the curation HTTP service.
    Serve {
        /// Overrides DEMOKIT_PORT.
        #[arg(long)]
        port: Option<u16>,
        /// Overrides DEMOKIT_DATA_ROOT.
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Run several stages as one plan.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated stages; default all.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Write a synthetic input root with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        count: usize,
        /// Gaussian noise on calibration keypoints, pixels.
        #[arg(long, default_value_t = 0.0)]
        noise_px: f64,
    },
}

fn config_for(cli: &Cli) -> Result<Config, PipelineError> {
    RunPlan {
        stages: vec![Stage::Ingest],
        config: cli.config.clone(),
        input: PathBuf::new(),
        output: PathBuf::new(),
        seed: cli.seed,
        jobs: cli.jobs,
    }
    .effective_config()
}

fn registry(config: &Config) -> Result<RobotRegistry, PipelineError> {
    match &config.pipeline.robots_dir {
        Some(d) => RobotRegistry::with_dir(Path::new(d)).map_err(|e| PipelineError::Input(e.to_string())),
        None => Ok(RobotRegistry::builtin()),
    }
}

fn finish(out: &Path, report: &StageReport, episodes: &[demokit_core::episode::Episode]) -> Result<i32, PipelineError> {
    io::save_dir(out, episodes)?;
    for f in &report.failures {
        eprintln!("{}: {}", f.episode_id, f.error);
    }
    println!("{}: ok {} failed {}", report.stage, report.ok, report.failed);
    Ok(if report.failed > 0 { 2 } else { 0 })
}

fn parse_families(names: &[String]) -> Result<Vec<VqaFamily>, PipelineError> {
    names
        .iter()
        .map(|n| n.parse::<VqaFamily>().map_err(|e| PipelineError::Input(e.to_string())))
        .collect()
}

fn execute(cli: Cli) -> Result<i32, PipelineError> {
    let mut config = config_for(&cli)?;
    let pool = pipeline::thread_pool(config.pipeline.jobs)?;
    match cli.command {
        Command::Ingest { episodes, out } => {
            let (eps, failures) = io::load_dir(&episodes)?;
            let o = pipeline::ingest(eps, failures);
            finish(&out, &o.report, &o.episodes)
        }
        Command::Calibrate {
            samples,
            episodes,
            out,
            projected,
        } => {
            let samples: Vec<CalibrationSample> = io::read_json(&samples)?;
            let (eps, _) = io::load_dir(&episodes)?;
            let reg = registry(&config)?;
            let (o, table) = pool.install(|| pipeline::calibrate(eps, &samples, &config, &reg));
            io::write_json(&out, &table)?;
            if table.values().any(|c| c.error.is_some()) {
                return Ok(2);
            }
            match projected {
                Some(dir) => finish(&dir, &o.report, &o.episodes),
                None => Ok(0),
            }
        }
        Command::Correct {
            episodes,
            out,
            iou_threshold,
            aspect_limit,
            speed_threshold,
            video_onset_file,
        } => {
            let c = &mut config.correction;
            c.iou_threshold = iou_threshold.unwrap_or(c.iou_threshold);
            c.aspect_limit = aspect_limit.unwrap_or(c.aspect_limit);
            c.speed_threshold = speed_threshold.unwrap_or(c.speed_threshold);
            config.validate()?;
            let onsets: BTreeMap<String, usize> = match video_onset_file {
                Some(p) => io::read_json(&p)?,
                None => BTreeMap::new(),
            };
            let (eps, mut failures) = io::load_dir(&episodes)?;
            let (mut o, records) = pool.install(|| pipeline::correct(eps, &onsets, &config));
            failures.append(&mut o.report.failures);
            o.report.failed = failures.len();
            o.report.failures = failures;
            io::write_json(&out.join("corrections.json"), &records)?;
            finish(&out.join(EPISODES_DIR), &o.report, &o.episodes)
        }
        Command::Derive { episodes, out } => {
            let (eps, mut failures) = io::load_dir(&episodes)?;
            let mut o = pool.install(|| pipeline::derive(eps, &config));
            failures.append(&mut o.report.failures);
            o.report.failed = failures.len();
            o.report.failures = failures;
            finish(&out, &o.report, &o.episodes)
        }
        Command::Genvqa {
            episodes,
            out,
            families,
            eval_ids,
            frames,
        } => {
            if !families.is_empty() {
                config.vqa.families = parse_families(&families)?;
            }
            let (eps, load_failures) = io::load_dir(&episodes)?;
            let ids: BTreeSet<String> = match eval_ids {
                Some(p) => io::read_id_list(&p)?.into_iter().collect(),
                None => {
                    let all: Vec<String> = eps.iter().map(|e| e.episode_id.clone()).collect();
                    pipeline::choose_eval_ids(&all, config.vqa.eval_fraction, config.pipeline.seed)
                }
            };
            io::reset_dir(&out)?;
            let frames = frames.unwrap_or_else(|| episodes.join("..").join(FRAMES_DIR));
            let render = config.vqa.render_overlays.then_some((frames.as_path(), out.as_path()));
            let (items, report) = pool.install(|| pipeline::genvqa(&eps, &ids, &config, render))?;
            std::fs::write(out.join(ITEMS), to_jsonl(&items)).map_err(|e| PipelineError::io(&out, e))?;
            for f in load_failures.iter().chain(&report.failures) {
                eprintln!("{}: {}", f.episode_id, f.error);
            }
            println!("genvqa: {} items from {} episodes", items.len(), report.ok);
            Ok(if report.failed + load_failures.len() > 0 { 2 } else { 0 })
        }
        Command::Evaluate {
            task,
            pred,
            truth,
            chunks_pred,
            chunks_truth,
            report,
        } => {
            let family = task
                .map(|t| t.parse::<VqaFamily>().map_err(|e| PipelineError::Input(e.to_string())))
                .transpose()?;
            let mut out = EvalReport::default();
            match (pred, truth) {
                (Some(p), Some(t)) => {
                    let text = std::fs::read_to_string(&t).map_err(|e| PipelineError::io(&t, e))?;
                    let items = from_jsonl(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", t.display())))?;
                    let preds: Vec<Prediction> = io::read_jsonl(&p)?;
                    out = score_predictions(&items, &preds, family).map_err(|e| PipelineError::Input(e.to_string()))?;
                }
                (None, None) => {}
                _ => return Err(PipelineError::Input("--pred and --truth go together".into())),
            }
            match (chunks_pred, chunks_truth) {
                (Some(p), Some(t)) => {
                    let preds: Vec<ChunkRecord> = io::read_jsonl(&p)?;
                    let truth: Vec<ChunkRecord> = io::read_jsonl(&t)?;
                    let base = OlsConfig {
                        tau: 0.0,
                        theta: config.metrics.theta,
                        aggregate: config.metrics.aggregate,
                    };
                    out.ols = Some(score_chunks(&truth, &preds, &base).map_err(|e| PipelineError::Input(e.to_string()))?);
                }
                (None, None) => {}
                _ => return Err(PipelineError::Input("--chunks-pred and --chunks-truth go together".into())),
            }
            io::write_json(&report, &out)?;
            for (f, s) in &out.families {
                println!("{f}: {:?} {:.4} (n={}, missing={})", s.metric, s.score, s.count, s.missing);
            }
            if let Some(t) = &out.ols {
                println!("{}", t.cells().iter().map(|(h, v)| format!("{h}={v:.4}")).collect::<Vec<_>>().join(" "));
            }
            Ok(0)
        }
        Command::Qc { episodes, report } => {
            let validity = validity_of_dir(&episodes, &config.derive)?;
            let r = qc_sample(&validity, &config.qc, config.pipeline.seed).map_err(|e| PipelineError::Input(e.to_string()))?;
            io::write_json(&report, &r)?;
            println!("qc: {} of {} subsets failed", r.failed.len(), r.subsets.len());
            Ok(if r.failed.is_empty() { 0 } else { 2 })
        }
        Command::Serve { port, data_root } => crate::serve(port, data_root),
        Command::Run { input, output, stages } => {
            let stages = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stages
                    .iter()
                    .map(|s| s.parse::<Stage>().map_err(PipelineError::Dependency))
                    .collect::<Result<_, _>>()?
            };
            let plan = RunPlan {
                stages,
                config: cli.config,
                input,
                output,
                seed: cli.seed,
                jobs: cli.jobs,
            };
            let report = pipeline::run(&plan)?;
            for s in &report.stages {
                println!("{}: ok {} failed {}", s.stage, s.ok, s.failed);
            }
            Ok(report.exit_code())
        }
        Command::Synth { out, count, noise_px } => {
            let corpus = crate::corpus::write_corpus(&out, count, config.pipeline.seed, noise_px)?;
            println!("synth: {} episodes in {}", corpus.len(), out.display());
            Ok(0)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
