//! End-to-end plumbing: patch-free evaluation equivalence, bundle round
//! trips through a real training run, and the training log schedule.

use tempfile::TempDir;

use tlpatch_core::data::{load_patch_bundle, save_patch_bundle, BundleMeta, BUNDLE_SCHEMA_VERSION};
use tlpatch_core::detector::{ContextBlobDetector, CLASS_GREEN, CLASS_NAMES, CLASS_RED};
use tlpatch_core::evaluator::{collect_samples, evaluate_pair};
use tlpatch_core::synthetic::{
    benchmark_attack_config, benchmark_detector_config, render_dataset, SceneSpec,
};
use tlpatch_core::trainer::train;
use tlpatch_core::types::{AttackConfig, TargetClassMapping};

fn small_spec() -> SceneSpec {
    SceneSpec {
        image_width: 256,
        image_height: 224,
        max_lights: 2,
        ..SceneSpec::default()
    }
}

fn small_config() -> AttackConfig {
    AttackConfig {
        patch_side: 24,
        ..benchmark_attack_config()
    }
}

fn red_to_green() -> TargetClassMapping {
    TargetClassMapping::new([(CLASS_RED, CLASS_GREEN)]).unwrap()
}

#[test]
fn out_of_frame_patch_equals_patch_free_evaluation() {
    let scenes = render_dataset(&small_spec(), 6, 91).unwrap();
    let detector = ContextBlobDetector::new(benchmark_detector_config()).unwrap();
    let mapping = red_to_green();
    let patch = tlpatch_core::types::Patch::uniform(24, 0.5).unwrap();

    let clean = collect_samples(&scenes, &detector, &mapping, None);
    // A scale this large never fits the frame, so the compositing path
    // must leave every pixel untouched.
    let unplaced = collect_samples(&scenes, &detector, &mapping, Some((&patch, 1000.0)));

    let report = evaluate_pair(&clean, &unplaced, &mapping);
    assert_eq!(report.clean, report.patched);
    let clean_json = serde_json::to_string(&report.clean).unwrap();
    let patched_json = serde_json::to_string(&report.patched).unwrap();
    assert_eq!(clean_json, patched_json);
}

#[test]
fn trained_patch_round_trips_through_a_bundle() {
    let scenes = render_dataset(&small_spec(), 4, 92).unwrap();
    let detector = ContextBlobDetector::new(benchmark_detector_config()).unwrap();
    let mapping = red_to_green();
    let config = small_config();
    let outcome = train(&scenes, &mapping, &detector, &config).unwrap();

    let dir = TempDir::new().unwrap();
    let meta = BundleMeta {
        schema_version: BUNDLE_SCHEMA_VERSION,
        created_unix: 0,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        mapping: mapping.iter().collect(),
        config: config.clone(),
        train_dataset: "synthetic".to_string(),
        patch_sha256: String::new(),
        png_sha256: String::new(),
    };
    save_patch_bundle(dir.path(), &outcome.patch, meta).unwrap();
    let (loaded, loaded_meta) = load_patch_bundle(dir.path()).unwrap();

    assert_eq!(loaded.pixels(), outcome.patch.pixels());
    assert_eq!(loaded_meta.config, config);

    let clean = collect_samples(&scenes, &detector, &mapping, None);
    let original = collect_samples(
        &scenes,
        &detector,
        &mapping,
        Some((&outcome.patch, config.eval_scale)),
    );
    let reloaded = collect_samples(
        &scenes,
        &detector,
        &mapping,
        Some((&loaded, config.eval_scale)),
    );
    let a = evaluate_pair(&clean, &original, &mapping);
    let b = evaluate_pair(&clean, &reloaded, &mapping);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn training_log_follows_the_box_schedule() {
    let scenes = render_dataset(&small_spec(), 3, 93).unwrap();
    let detector = ContextBlobDetector::new(benchmark_detector_config()).unwrap();
    let mapping = red_to_green();
    let config = small_config();
    let outcome = train(&scenes, &mapping, &detector, &config).unwrap();

    assert_eq!(
        outcome.steps,
        outcome.boxes_visited * config.pgd_steps as usize
    );
    assert_eq!(outcome.history.len(), outcome.steps);

    // Records arrive in dataset order, in runs of pgd_steps per box, and
    // only ever cite mapping-relevant boxes.
    let mut run_starts = Vec::new();
    for (i, record) in outcome.history.iter().enumerate() {
        let scene = scenes
            .iter()
            .find(|s| s.id == record.image_id)
            .expect("logged image exists");
        let gt = &scene.boxes[record.box_index];
        assert!(mapping.is_relevant(gt.class_id));
        if i % config.pgd_steps as usize == 0 {
            run_starts.push((record.image_id.clone(), record.box_index));
        } else {
            assert_eq!(record.image_id, outcome.history[i - 1].image_id);
            assert_eq!(record.box_index, outcome.history[i - 1].box_index);
        }
    }
    let mut sorted = run_starts.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), run_starts.len(), "a box was visited twice");

    // Every record's total recombines the logged terms with the weights.
    for r in &outcome.history {
        let recombined =
            config.alpha * r.cls + config.beta * r.bbox + config.gamma * r.tv + config.delta * r.suppress;
        assert!((r.total - recombined).abs() < 1e-12);
    }
}
