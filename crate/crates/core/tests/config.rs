use camo::config::{RunConfig, SCHEMA_VERSION};
use camo::evaluate::Thresholds;
use camo::Error;

#[test]
fn defaults_round_trip() {
    let cfg = RunConfig::with_seed(12);
    let back = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(back.attack.seed, 12);
    assert_eq!(back.evaluation.thresholds, Thresholds::default());
}

#[test]
fn minimal_document_fills_defaults() {
    let cfg = RunConfig::from_json(&format!(
        r#"{{"schema_version": {SCHEMA_VERSION}, "seed": 3}}"#
    ))
    .unwrap();
    assert_eq!(cfg.scene.image_size, 128);
    assert_eq!(cfg.attack.transforms, 3);
    assert_eq!(cfg.seed, 3);
}

#[test]
fn unknown_keys_are_rejected() {
    for doc in [
        r#"{"schema_version": 1, "seed": 3, "colour": 1}"#,
        r#"{"schema_version": 1, "seed": 3, "scene": {"image_sise": 64}}"#,
        r#"{"schema_version": 1, "seed": 3, "attack": {"weights": {"alpha3": 1.0}}}"#,
    ] {
        assert!(
            matches!(RunConfig::from_json(doc), Err(Error::Config(_))),
            "{doc}"
        );
    }
}

#[test]
fn seed_is_mandatory() {
    let err = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn schema_version_is_checked() {
    assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_err());
    let err = RunConfig::from_json(r#"{"schema_version": 99, "seed": 1}"#).unwrap_err();
    assert!(err.to_string().contains("schema_version"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    let mut cfg = RunConfig::with_seed(1);
    cfg.scene.test_locations = cfg.scene.locations;
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::with_seed(1);
    cfg.scene.yaws.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::with_seed(1);
    cfg.attack.weights.alpha1 = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn load_reports_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{").unwrap();
    let err = RunConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("bad.json"), "{err}");
    assert!(RunConfig::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn render_count_is_poses_times_locations() {
    let mut cfg = RunConfig::with_seed(5);
    cfg.scene.image_size = 32;
    cfg.scene.distances = vec![5.0, 7.0];
    cfg.scene.pitches = vec![60.0, 90.0];
    cfg.scene.yaws = vec![0.0, 120.0, 240.0];
    cfg.scene.locations = 3;
    cfg.scene.test_locations = 1;
    let mesh = cfg.mesh().unwrap();
    let data = cfg.desk_dataset(&mesh).unwrap();
    assert_eq!(data.len(), 12 * 3);
    assert_eq!(data.train.len(), 12 * 2);
    assert_eq!(data.test.len(), 12);
    let train_locations: Vec<usize> = data.train.iter().map(|s| s.spec.location.id).collect();
    assert!(data
        .test
        .iter()
        .all(|s| !train_locations.contains(&s.spec.location.id)));
    let mut ids: Vec<String> = data
        .train
        .iter()
        .chain(&data.test)
        .map(|s| s.spec.id())
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 36);
}
