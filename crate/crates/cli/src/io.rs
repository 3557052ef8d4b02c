//! Episode directories, JSON/JSONL files and content digests.

use std::fs;
use std::path::{Path, PathBuf};

use demokit_core::episode::{load_episode, save_episode, Episode};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::pipeline::{EpisodeFailure, PipelineError};

pub const EPISODES_DIR: &str = "episodes";

/// Manifest paths (`*.json`) in `dir`, sorted by file name. A stage output
/// root with an `episodes/` subdirectory is read from that subdirectory.
pub fn manifest_paths(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let nested = dir.join(EPISODES_DIR);
    let dir = if nested.is_dir() { nested.as_path() } else { dir };
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Loads every manifest in `dir` in parallel. Unreadable manifests become
/// failures keyed by file stem; the result keeps file-name order.
pub fn load_dir(dir: &Path) -> Result<(Vec<Episode>, Vec<EpisodeFailure>), PipelineError> {
    let loaded: Vec<Result<Episode, EpisodeFailure>> = manifest_paths(dir)?
        .par_iter()
        .map(|p| {
            load_episode(p).map_err(|e| EpisodeFailure {
                episode_id: stem(p),
                error: e.to_string(),
            })
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in loaded {
        match r {
            Ok(e) => ok.push(e),
            Err(f) => failed.push(f),
        }
    }
    Ok((ok, failed))
}

/// Replaces `dir` with the given episodes.
pub fn save_dir(dir: &Path, episodes: &[Episode]) -> Result<(), PipelineError> {
    reset_dir(dir)?;
    episodes
        .par_iter()
        .map(|e| {
            save_episode(e, dir.join(format!("{}.json", e.episode_id))).map_err(|err| PipelineError::Stage(err.to_string()))
        })
        .collect::<Result<Vec<()>, _>>()?;
    Ok(())
}

pub fn reset_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Input(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Non-empty trimmed lines of a text file.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of every file under `root`, keyed by `/`-separated relative path.
pub fn digest_tree(root: &Path) -> Result<std::collections::BTreeMap<String, String>, PipelineError> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| PipelineError::io(&dir, e))? {
            let path = entry.map_err(|e| PipelineError::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
                out.insert(key, sha256_hex(&bytes));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use demokit_core::episode::fixtures::tiny_episode;

    #[test]
    fn stage_root_reads_its_episodes_subdir() {
        let dir = tempfile::tempdir().unwrap();
        let e = tiny_episode(4);
        save_dir(&dir.path().join(EPISODES_DIR), std::slice::from_ref(&e)).unwrap();
        write_json(&dir.path().join("corrections.json"), &serde_json::json!([])).unwrap();
        let (eps, failures) = load_dir(dir.path()).unwrap();
        assert!(failures.is_empty(), "{failures:?}");
        assert_eq!(eps, vec![e]);
    }
}
