//! Subset sampling for annotation quality control.
//!
//! Episodes (sorted by id) are split into `subset_count` contiguous subsets
//! whose sizes differ by at most one. Each subset is sampled without
//! replacement and passes when the valid share of its sample reaches
//! `pass_ratio`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::QcConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QcError {
    #[error("{episodes} episodes cannot fill {subsets} subsets")]
    TooFewEpisodes { episodes: usize, subsets: usize },
    #[error("invalid QC settings: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub index: usize,
    pub size: usize,
    pub sampled: Vec<String>,
    pub valid: usize,
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub seed: u64,
    pub pass_ratio: f64,
    pub subsets: Vec<SubsetReport>,
    /// Indices of subsets returned for re-annotation.
    pub failed: Vec<usize>,
}

fn subset_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `validity` maps episode id to whether its annotations are acceptable.
pub fn qc_sample(validity: &BTreeMap<String, bool>, config: &QcConfig, seed: u64) -> Result<QcReport, QcError> {
    if config.subset_count == 0 || config.samples_per_subset == 0 {
        return Err(QcError::Config("subset_count and samples_per_subset must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.pass_ratio) {
        return Err(QcError::Config("pass_ratio must lie in [0, 1]".into()));
    }
    let n = validity.len();
    let k = config.subset_count;
    if n < k {
        return Err(QcError::TooFewEpisodes { episodes: n, subsets: k });
    }
    let ids: Vec<(&String, bool)> = validity.iter().map(|(id, v)| (id, *v)).collect();
    let mut subsets = Vec::with_capacity(k);
    let mut start = 0;
    for index in 0..k {
        let size = n / k + usize::from(index < n % k);
        let members = &ids[start..start + size];
        start += size;
        let take = config.samples_per_subset.min(size);
        let mut picks = rand::seq::index::sample(&mut subset_rng(seed, index), size, take).into_vec();
        picks.sort_unstable();
        let sampled: Vec<String> = picks.iter().map(|&i| members[i].0.clone()).collect();
        let valid = picks.iter().filter(|&&i| members[i].1).count();
        let ratio = valid as f64 / take as f64;
        subsets.push(SubsetReport {
            index,
            size,
            sampled,
            valid,
            ratio,
            passed: ratio >= config.pass_ratio,
        });
    }
    let failed = subsets.iter().filter(|s| !s.passed).map(|s| s.index).collect();
    Ok(QcReport {
        seed,
        pass_ratio: config.pass_ratio,
        subsets,
        failed,
    })
}
