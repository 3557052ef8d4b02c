//! Writes a synthetic input root: episodes, calibration samples and video
//! onsets, laid out the way `run` expects.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use demokit_core::kinematics::RobotRegistry;
use demokit_core::synth::{calibration_samples, synth_corpus, SynthEpisode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{self, EPISODES_DIR};
use crate::pipeline::{PipelineError, CALIBRATION_SAMPLES, VIDEO_ONSETS};

/// Ground truth kept next to a synthetic corpus for later checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub ee_offset: [f64; 3],
    pub lag: i64,
    pub video_onset: usize,
    pub contact_frame: usize,
}

pub const TRUTH: &str = "truth.json";

pub fn write_corpus(root: &Path, count: usize, seed: u64, noise_px: f64) -> Result<Vec<SynthEpisode>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = synth_corpus(count, &mut rng).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let episodes: Vec<_> = corpus.iter().map(|s| s.episode.clone()).collect();
    io::save_dir(&root.join(EPISODES_DIR), &episodes)?;
    let registry = RobotRegistry::builtin();
    let mut samples = Vec::new();
    for robot in ["planar2", "arm6"] {
        let model = registry.get(robot).map_err(|e| PipelineError::Stage(e.to_string()))?;
        samples.extend(calibration_samples(&corpus, model, 3, noise_px, &mut rng).map_err(|e| PipelineError::Stage(e.to_string()))?);
    }
    io::write_json(&root.join(CALIBRATION_SAMPLES), &samples)?;
    let onsets: BTreeMap<&str, usize> = corpus.iter().map(|s| (s.episode.episode_id.as_str(), s.truth.video_onset)).collect();
    io::write_json(&root.join(VIDEO_ONSETS), &onsets)?;
    let truth: BTreeMap<&str, TruthRecord> = corpus
        .iter()
        .map(|s| {
            (
                s.episode.episode_id.as_str(),
                TruthRecord {
                    ee_offset: s.truth.ee_offset,
                    lag: s.truth.lag,
                    video_onset: s.truth.video_onset,
                    contact_frame: s.truth.contact_frame,
                },
            )
        })
        .collect();
    io::write_json(&root.join(TRUTH), &truth)?;
    Ok(corpus)
}

/// Overwrites one manifest with unparseable bytes.
pub fn corrupt_manifest(root: &Path, episode_id: &str) -> Result<(), PipelineError> {
    let p = root.join(EPISODES_DIR).join(format!("{episode_id}.json"));
    fs::write(&p, b"{ not json").map_err(|e| PipelineError::io(&p, e))
}
