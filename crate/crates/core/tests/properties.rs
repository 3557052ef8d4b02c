//! Randomized checks of the library-wide invariants.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use demokit_core::calibration::{calibrate_offset, reprojection_error, CalibrationConfig, Observation};
use demokit_core::correction::{spatial_correct, temporal_correct};
use demokit_core::derive::fcot::{collect_values, parse, serialize_fcot, FcotForm, FcotItem, FcotOutput, FcotSpec};
use demokit_core::derive::{project_episode, with_derived, DeriveConfig};
use demokit_core::episode::{load_episode, save_episode, Episode};
use demokit_core::geometry::{Rect, Se3};
use demokit_core::kinematics::{project_keypoints, project_point, RobotRegistry};
use demokit_core::metrics::{bleu_avg, dtw, iou, ols, ActionChunk, OlsConfig};
use demokit_core::synth::{calibration_samples, corpus_offsets, synth_corpus, SynthEpisode};
use demokit_core::vqa::{generate_items, template_pattern, templates_for, to_jsonl, Answer, VqaContext, VqaFamily};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> &'static [SynthEpisode] {
    static C: OnceLock<Vec<SynthEpisode>> = OnceLock::new();
    C.get_or_init(|| synth_corpus(6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap())
}

/// Corpus episodes projected with the planted offsets, corrected and derived.
fn derived() -> &'static [Episode] {
    static D: OnceLock<Vec<Episode>> = OnceLock::new();
    D.get_or_init(|| {
        let registry = RobotRegistry::builtin();
        let offsets = corpus_offsets();
        corpus()
            .iter()
            .map(|se| {
                let e = &se.episode;
                let p = project_episode(e, registry.get(&e.robot_id).unwrap(), &Vector3::from(offsets[e.robot_id.as_str()])).unwrap();
                let (t, _) = temporal_correct(&p, se.truth.video_onset, 0.002).unwrap();
                let (s, _) = spatial_correct(&t, 0.1, 4.0).unwrap();
                with_derived(&s, &DeriveConfig::default()).unwrap()
            })
            .collect()
    })
}

fn arb_se3() -> impl Strategy<Value = Se3> {
    (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(-3.0f64..3.0)).prop_map(|(t, r)| Se3 {
        translation: Vector3::from(t),
        rotation: UnitQuaternion::from_euler_angles(r[0], r[1], r[2]),
    })
}

fn arb_rect() -> impl Strategy<Value = Rect> {
    (0.0f64..100.0, 0.0f64..100.0, 0.5f64..50.0, 0.5f64..50.0).prop_map(|(x, y, w, h)| Rect::new(x, y, x + w, y + h))
}

fn arb_trace() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(0.0f64..200.0), 1..12)
}

fn close(a: &Se3, b: &Se3, tol: f64) -> bool {
    (a.translation - b.translation).norm() < tol && a.rotation.angle_to(&b.rotation) < tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn se3_group_laws(a in arb_se3(), b in arb_se3(), c in arb_se3()) {
        prop_assert!(close(&a.compose(&a.inverse()), &Se3::identity(), 1e-12));
        prop_assert!(close(&a.inverse().compose(&a), &Se3::identity(), 1e-12));
        prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-12));
    }

    #[test]
    fn keypoints_with_zero_offset_compose_fk_and_projection(ep in 0usize..6, frame in 0usize..60) {
        let e = &corpus()[ep].episode;
        let model = RobotRegistry::builtin().get(&e.robot_id).unwrap().clone();
        let rec = &e.frames[frame];
        let kp = project_keypoints(&model, &e.camera, rec, &Vector3::zeros()).unwrap();
        let poses = model.forward_kinematics(&rec.joint_positions, rec.gripper_opening).unwrap();
        for k in &model.keypoints {
            let p = project_point(&e.camera, &poses[&k.name].translation).unwrap();
            prop_assert_eq!(kp.pixels[&k.name], p);
        }
    }

    #[test]
    fn manifests_round_trip(ep in 0usize..6, use_derived in any::<bool>()) {
        let e = if use_derived { &derived()[ep] } else { &corpus()[ep].episode };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_episode(e, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_episode(&p).unwrap();
        prop_assert_eq!(&back, e);
        save_episode(&back, &p).unwrap();
        prop_assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn calibration_objective_ignores_order_and_never_worsens(seed in any::<u64>(), rotate in 0usize..8) {
        let registry = RobotRegistry::builtin();
        let model = registry.get("planar2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = calibration_samples(corpus(), model, 3, 2.0, &mut rng).unwrap();
        let e0 = corpus().iter().find(|s| s.episode.robot_id == "planar2").unwrap();
        let mut obs: Vec<Observation> = samples
            .iter()
            .map(|s| Observation {
                record: corpus().iter().find(|c| c.episode.episode_id == s.episode_id).unwrap().episode.frames[s.frame].clone(),
                sample: s.clone(),
            })
            .collect();
        let probe = Vector3::new(0.01, 0.02, -0.01);
        let a = reprojection_error(model, &e0.episode.camera, &obs, &probe).unwrap();
        let len = obs.len();
        obs.rotate_left(rotate % len);
        obs.reverse();
        let b = reprojection_error(model, &e0.episode.camera, &obs, &probe).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        let r = calibrate_offset(model, &e0.episode.camera, &obs, &CalibrationConfig::default()).unwrap();
        prop_assert!(r.final_error <= r.initial_error + 1e-9);
    }

    #[test]
    fn corrections_are_shape_preserving_and_idempotent(ep in 0usize..6, onset in 0usize..60) {
        let e = &derived()[ep];
        let (t, rec) = temporal_correct(e, onset, 0.002).unwrap();
        prop_assert_eq!(t.frames.len(), e.frames.len());
        prop_assert_eq!(rec.shift, onset as i64 - rec.traj_onset as i64);
        let (once, _) = spatial_correct(&t, 0.1, 4.0).unwrap();
        let (twice, second) = spatial_correct(&once, 0.1, 4.0).unwrap();
        prop_assert!(!second.applied);
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn fcot_text_round_trips(ep in 0usize..6, frame in 0usize..60, picks in prop::sample::subsequence(FcotItem::ALL.to_vec(), 1..=6), shuffle in any::<u64>()) {
        let e = &derived()[ep];
        let mut items = picks;
        let mut r = ChaCha8Rng::seed_from_u64(shuffle);
        rand::seq::SliceRandom::shuffle(items.as_mut_slice(), &mut r);
        let spec = FcotSpec::new(items, FcotForm::Textual).unwrap();
        // representations missing at this frame are an error on both paths
        if let Ok(values) = collect_values(e, frame, &spec) {
            let FcotOutput::Textual { text } = serialize_fcot(e, frame, &spec).unwrap() else { panic!("textual form expected") };
            prop_assert_eq!(parse(&text).unwrap(), values);
        }
    }

    #[test]
    fn metric_identities(a in arb_trace(), b in arb_trace(), r in arb_rect(), s in arb_rect()) {
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        prop_assert!((dtw(&a, &b).unwrap() - dtw(&b, &a).unwrap()).abs() < 1e-9);
        let v = iou(&r, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou(&s, &r).unwrap()).abs() < 1e-12);
        prop_assert!((iou(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_of_an_included_reference_is_100(words in prop::collection::vec("[a-z]{1,6}", 1..12), other in "[a-z ]{0,30}") {
        let c = words.join(" ");
        let b = bleu_avg(&c, &[other.as_str(), c.as_str()]).unwrap();
        prop_assert!((b - 100.0).abs() < 1e-9, "{}", b);
    }

    #[test]
    fn ols_ignores_pair_order(vals in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..10), tau in 0.01f64..0.5, theta in 0.0f64..=1.0, k in 0usize..10) {
        let pairs: Vec<(ActionChunk, ActionChunk)> = vals
            .iter()
            .map(|v| (ActionChunk::new(vec![v[..3].to_vec()]), ActionChunk::new(vec![v[3..].to_vec()])))
            .collect();
        let cfg = OlsConfig { theta, ..OlsConfig::new(tau) };
        let mut moved = pairs.clone();
        let len = moved.len();
        moved.rotate_left(k % len);
        prop_assert_eq!(ols(&pairs, &cfg).unwrap(), ols(&moved, &cfg).unwrap());
    }
}

#[test]
fn vqa_items_are_pure_and_use_the_template_bank() {
    let eps = derived();
    let ctx = VqaContext::from_episodes(eps);
    let families: BTreeSet<VqaFamily> = VqaFamily::ALL.into_iter().collect();
    for e in eps {
        let items = generate_items(e, &families, 13, &ctx).unwrap();
        assert_eq!(to_jsonl(&items), to_jsonl(&generate_items(e, &families, 13, &ctx).unwrap()));
        for it in &items {
            let template = &templates_for(it.family)[it.template_index];
            assert!(template_pattern(template).is_match(&it.prompt), "{}: {:?}", it.item_id, it.prompt);
            if let (Some(choices), Answer::Label(a)) = (&it.choices, &it.answer) {
                assert_eq!(choices.iter().filter(|c| &c.label == a).count(), 1, "{}", it.item_id);
                let distinct: BTreeSet<&str> = choices.iter().map(|c| c.content.as_str()).collect();
                assert_eq!(distinct.len(), choices.len(), "{}", it.item_id);
            }
        }
    }
}
