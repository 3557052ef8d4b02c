//! Quality-control sampling over an episode directory.

use std::collections::BTreeMap;
use std::path::Path;

use demokit_core::derive::{derive_all, DeriveConfig};
use demokit_core::episode::load_episode;
pub use demokit_core::qc::{qc_sample, QcError, QcReport, SubsetReport};

use crate::io::manifest_paths;
use crate::pipeline::PipelineError;

/// Default validity: the manifest loads with all invariants, and derived
/// annotations are present or computable.
pub fn validity_of_dir(dir: &Path, derive: &DeriveConfig) -> Result<BTreeMap<String, bool>, PipelineError> {
    let mut out = BTreeMap::new();
    for p in manifest_paths(dir)? {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let valid = match load_episode(&p) {
            Ok(e) => e.annotations.derived.is_some() || derive_all(&e, derive).is_ok(),
            Err(_) => false,
        };
        out.insert(id, valid);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use demokit_core::episode::save_episode;
    use demokit_core::synth::synth_corpus;
    use rand::SeedableRng;

    #[test]
    fn corrupt_and_underived_episodes_are_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &corpus {
            save_episode(&s.episode, dir.path().join(format!("{}.json", s.episode.episode_id))).unwrap();
        }
        std::fs::write(dir.path().join("broken.json"), "{").unwrap();
        let v = validity_of_dir(dir.path(), &DeriveConfig::default()).unwrap();
        // synthetic episodes carry no projection yet, so nothing is derivable
        assert_eq!(v.len(), 3);
        assert!(v.values().all(|ok| !ok));
    }
}
