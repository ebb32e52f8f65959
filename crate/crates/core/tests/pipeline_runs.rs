use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use discurate::pipeline::{CleanScene, Pipeline, PipelineConfig, PipelineError, Stage};
use discurate::QaSample;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

fn pipeline(out: &Path, edit: impl FnOnce(&mut PipelineConfig)) -> Pipeline {
    let text = std::fs::read_to_string(fixture().join("config.toml")).unwrap();
    let mut config = PipelineConfig::from_toml(&text).unwrap();
    config.output_dir = out.to_path_buf();
    edit(&mut config);
    Pipeline::new(config, &fixture()).unwrap()
}

fn all() -> BTreeSet<Stage> {
    Stage::ALL.into_iter().collect()
}

#[test]
fn rerun_is_served_from_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline(dir.path(), |_| {}).run(&all()).unwrap();
    assert!(first.stages.iter().any(|s| s.oracle_calls > 0));
    let dataset = std::fs::read(dir.path().join("dataset.jsonl")).unwrap();

    let second = pipeline(dir.path(), |_| {}).run(&all()).unwrap();
    for s in &second.stages {
        assert_eq!(s.cached, s.units, "{s:?}");
        assert_eq!(s.oracle_calls, 0, "{s:?}");
    }
    assert_eq!(
        std::fs::read(dir.path().join("dataset.jsonl")).unwrap(),
        dataset
    );
}

#[test]
fn seed_change_reruns_seeded_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), |_| {}).run(&all()).unwrap();
    let rerun = pipeline(dir.path(), |c| c.seed = 7).run(&all()).unwrap();
    let by_stage = |st: Stage| {
        rerun
            .stages
            .iter()
            .find(|s| s.stage == Some(st))
            .unwrap()
            .clone()
    };
    let clean = by_stage(Stage::Clean);
    assert_eq!(clean.cached, clean.units);
    let generate = by_stage(Stage::Generate);
    assert_eq!(generate.cached, 0);
}

#[test]
fn overexposed_scene_is_dropped_and_excluded_frame_skipped() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), |_| {}).run(&all()).unwrap();
    let read = |scene: &str| -> CleanScene {
        serde_json::from_slice(
            &std::fs::read(dir.path().join(format!("clean/{scene}.json"))).unwrap(),
        )
        .unwrap()
    };
    let dropped = read("scene2");
    assert!(
        dropped.dropped.as_deref().unwrap().contains("overexposed"),
        "{:?}",
        dropped.dropped
    );
    assert!(dropped.objects.is_empty());
    assert_eq!(
        read("scene1").diagnostics.excluded_frames,
        vec!["f002".to_string()]
    );

    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    let scenes: BTreeSet<String> = text
        .lines()
        .map(|l| serde_json::from_str::<QaSample>(l).unwrap().scene_id)
        .collect();
    assert_eq!(
        scenes,
        BTreeSet::from(["scene0".to_string(), "scene1".to_string()])
    );
}

#[test]
fn later_stage_without_upstream_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline(dir.path(), |_| {})
        .run(&BTreeSet::from([Stage::Refer]))
        .unwrap_err();
    match err {
        PipelineError::MissingUpstream { stage, .. } => assert_eq!(stage, Stage::Refer),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn exhausted_failure_budget_stops_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path(), |c| {
        c.oracles.default.script = None;
        c.oracles.default.rules = false;
        c.failure_budget = 0;
    });
    let err = p
        .run(&BTreeSet::from([Stage::Clean, Stage::Annotate]))
        .unwrap_err();
    match &err {
        PipelineError::Budget {
            stage,
            budget,
            failures,
        } => {
            assert_eq!(*stage, Stage::Annotate);
            assert_eq!(*budget, 0);
            assert!(!failures.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().starts_with("annotate:"), "{err}");
    assert!(!dir.path().join("annotate/scene0.json").exists());
}
