//! Synthetic corpus through calibration, correction, derivation and VQA
//! generation, checked against the planted ground truth.

use std::collections::{BTreeMap, BTreeSet};

use demokit_core::calibration::{calibrate_offset, CalibrationConfig, Observation};
use demokit_core::correction::{spatial_correct, temporal_correct, CorrectionConfig, SpatialReason};
use demokit_core::derive::{project_episode, with_derived, DeriveConfig};
use demokit_core::episode::{decode_mask, load_episode, save_episode, Episode};
use demokit_core::kinematics::RobotRegistry;
use demokit_core::synth::{calibration_samples, corpus_offsets, synth_corpus, SynthEpisode};
use demokit_core::vqa::{assign_split, check_no_leakage, generate_items, to_jsonl, VqaContext, VqaFamily};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> Vec<SynthEpisode> {
    synth_corpus(9, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
}

fn calibrated(corpus: &[SynthEpisode]) -> BTreeMap<String, [f64; 3]> {
    let registry = RobotRegistry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut out = BTreeMap::new();
    for robot in ["planar2", "arm6"] {
        let model = registry.get(robot).unwrap();
        let samples = calibration_samples(corpus, model, 4, 0.0, &mut rng).unwrap();
        let by_id: BTreeMap<&str, &Episode> = corpus.iter().map(|s| (s.episode.episode_id.as_str(), &s.episode)).collect();
        let obs: Vec<Observation> = samples
            .iter()
            .map(|s| Observation {
                record: by_id[s.episode_id.as_str()].frames[s.frame].clone(),
                sample: s.clone(),
            })
            .collect();
        let camera = &by_id[obs[0].sample.episode_id.as_str()].camera;
        let res = calibrate_offset(model, camera, &obs, &CalibrationConfig::default()).unwrap();
        assert!(res.final_error <= res.initial_error);
        out.insert(robot.to_string(), res.offset);
    }
    out
}

#[test]
fn calibration_recovers_corpus_offsets() {
    let offsets = calibrated(&corpus());
    for (robot, truth) in corpus_offsets() {
        for a in 0..3 {
            assert!((offsets[robot][a] - truth[a]).abs() < 1e-4, "{robot}: {:?} vs {truth:?}", offsets[robot]);
        }
    }
}

/// Mean pixel position of a mask, by scanning the decoded grid.
fn centroid_scan(e: &Episode, object: &str, frame: usize) -> (f64, f64) {
    let g = decode_mask(e.annotations.mask_at(object, frame).unwrap()).unwrap();
    let pts: Vec<(u32, u32)> = g.foreground().collect();
    let n = pts.len() as f64;
    (pts.iter().map(|p| p.0 as f64).sum::<f64>() / n, pts.iter().map(|p| p.1 as f64).sum::<f64>() / n)
}

#[test]
fn correction_and_derivation_follow_the_planted_truth() {
    let corpus = corpus();
    let offsets = calibrated(&corpus);
    let registry = RobotRegistry::builtin();
    let cc = CorrectionConfig::default();
    let mut derived = Vec::new();
    for (i, se) in corpus.iter().enumerate() {
        let e = &se.episode;
        let projected = project_episode(e, registry.get(&e.robot_id).unwrap(), &Vector3::from(offsets[&e.robot_id])).unwrap();
        let (aligned, t) = temporal_correct(&projected, se.truth.video_onset, cc.speed_threshold).unwrap();
        assert_eq!(t.shift, -se.truth.lag, "{}", e.episode_id);
        assert_eq!(aligned.frames.len(), e.frames.len());

        let (fixed, s) = spatial_correct(&aligned, cc.iou_threshold, cc.aspect_limit).unwrap();
        let contact = &fixed.annotations.contact_frames[0];
        if i % 3 == 2 {
            assert!(s.applied, "{}: {s:?}", e.episode_id);
            let (cx, cy) = centroid_scan(&fixed, &contact.object_id, contact.frame);
            let tcp = fixed.annotations.trace2d.as_ref().unwrap()[contact.frame].unwrap();
            assert!((tcp.x - cx).abs() < 1e-9 && (tcp.y - cy).abs() < 1e-9, "{}: tcp {tcp:?} vs ({cx}, {cy})", e.episode_id);
        } else {
            assert_eq!(s.reason, SpatialReason::IouAboveThreshold, "{}", e.episode_id);
        }

        let d = with_derived(&fixed, &DeriveConfig::default()).unwrap();
        let da = d.annotations.derived.as_ref().unwrap();
        assert_eq!(da.grasps.len(), d.annotations.contact_frames.len());
        // the grasp pose is the recorded TCP pose at contact, unchanged
        assert_eq!(da.grasps[0].grasp_pose, d.frames[contact.frame].tcp_pose);
        assert_eq!(da.gripper_boxes.len(), d.frames.len());
        assert_eq!(da.subtask_texts.len(), d.annotations.clips.len());
        derived.push(d);
    }

    let dir = tempfile::tempdir().unwrap();
    for d in &derived {
        let p = dir.path().join(format!("{}.json", d.episode_id));
        save_episode(d, &p).unwrap();
        assert_eq!(&load_episode(&p).unwrap(), d);
    }

    let families: BTreeSet<VqaFamily> = VqaFamily::ALL.into_iter().collect();
    let eval: BTreeSet<String> = ["syn_004".to_string()].into();
    let train_ctx = VqaContext::from_episodes(derived.iter().filter(|e| !eval.contains(&e.episode_id)));
    let eval_ctx = VqaContext::from_episodes(derived.iter().filter(|e| eval.contains(&e.episode_id)));
    let generate = || -> Vec<_> {
        let items = derived
            .iter()
            .flat_map(|e| {
                let ctx = if eval.contains(&e.episode_id) { &eval_ctx } else { &train_ctx };
                generate_items(e, &families, 5, ctx).unwrap()
            })
            .collect();
        assign_split(items, &eval)
    };
    let items = generate();
    check_no_leakage(&items).unwrap();
    assert_eq!(to_jsonl(&items), to_jsonl(&generate()));
    for it in &items {
        it.check_choices().unwrap_or_else(|e| panic!("{}: {e}", it.item_id));
    }
    let seen: BTreeSet<VqaFamily> = items.iter().map(|i| i.family).collect();
    assert_eq!(seen.len(), VqaFamily::ALL.len(), "missing {:?}", families.difference(&seen).collect::<Vec<_>>());
}
