use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn camo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

/// A 64 px configuration small enough to train and attack in seconds.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let model = dir.join("model").join("detector.bin");
    let doc = serde_json::json!({
        "schema_version": 1,
        "seed": 21,
        "scene": {
            "image_size": 64,
            "distances": [5.0, 7.0],
            "pitches": [60.0, 90.0],
            "yaws": [0.0, 90.0, 180.0, 270.0],
            "locations": 2
        },
        "detector": { "train_scenes": 200, "train": { "epochs": 25, "min_ap": 0.0 } },
        "attack": { "epochs": 1, "transforms": 1, "batch_size": 4, "model_path": model },
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn gradcheck_passes_on_the_bundled_fixture() {
    let out = camo(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"), "{text}");
    for term in ["fas", "baa", "smooth", "nps", "total"] {
        assert!(text.lines().any(|l| l.starts_with(term)), "{text}");
    }

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = camo(&["gradcheck", "--transforms", "2", "--out", out_dir]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = json(dir.path().join("gradcheck_summary.json"));
    assert_eq!(summary["passed"], true);
    assert!(summary["max_relative_error"].as_f64().unwrap() < 1e-3);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = camo(&["paint-car"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    assert_eq!(code(&camo(&[])), 2);
    assert_eq!(code(&camo(&["attack", "--bogus-flag"])), 2);
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    let cases = [
        (
            "unknown.json",
            r#"{"schema_version": 1, "seed": 1, "scene": {"size": 64}}"#,
        ),
        ("noseed.json", r#"{"schema_version": 1}"#),
        ("schema.json", r#"{"schema_version": 7, "seed": 1}"#),
        ("broken.json", "{"),
    ];
    for (name, doc) in cases {
        let path = dir.path().join(name);
        std::fs::write(&path, doc).unwrap();
        let out = camo(&[
            "render-dataset",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out_dir,
        ]);
        assert_eq!(code(&out), 2, "{name}: {}", stderr(&out));
        assert!(
            stderr(&out).contains("configuration error"),
            "{name}: {}",
            stderr(&out)
        );
    }
    let missing = dir.path().join("missing.json");
    assert_eq!(
        code(&camo(&[
            "render-dataset",
            "--config",
            missing.to_str().unwrap()
        ])),
        2
    );
    // No config and no seed.
    assert_eq!(code(&camo(&["render-dataset", "--out", out_dir])), 2);
    // No white-box model configured.
    let plain = dir.path().join("plain.json");
    std::fs::write(&plain, r#"{"schema_version": 1, "seed": 1}"#).unwrap();
    assert_eq!(
        code(&camo(&[
            "attack",
            "--config",
            plain.to_str().unwrap(),
            "--out",
            out_dir
        ])),
        2
    );
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let plain = dir.path().join("plain.json");
    std::fs::write(&plain, r#"{"schema_version": 1, "seed": 1}"#).unwrap();
    let out = camo(&[
        "attack",
        "--config",
        plain.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--model",
        dir.path().join("absent.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("absent.bin"));
}

#[test]
fn render_dataset_writes_one_image_per_pose_and_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"schema_version": 1, "seed": 2,
            "scene": {"image_size": 32, "distances": [5.0, 7.0], "pitches": [90.0], "yaws": [0.0, 120.0, 240.0], "locations": 3}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = camo(&[
        "render-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let count = |split: &str| {
        std::fs::read_dir(out_dir.join("dataset").join(split))
            .unwrap()
            .count()
    };
    assert_eq!(count("train") + count("test"), 6 * 3);
    assert_eq!(count("test"), 6);
    let summary = json(out_dir.join("render-dataset_summary.json"));
    assert_eq!(summary["images"], 18);
    assert_eq!(summary["poses"], 6);
    let labels = json(out_dir.join("dataset").join("labels.json"));
    assert_eq!(labels.as_array().unwrap().len(), 18);
    // The resolved config lands beside the outputs, with overrides applied.
    let resolved = json(out_dir.join("config.json"));
    assert_eq!(resolved["output_dir"], out_dir.to_str().unwrap());
    assert_eq!(resolved["scene"]["sampled_face_fraction"], 0.6);

    let seeded = dir.path().join("seeded");
    let out = camo(&[
        "render-dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        seeded.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0);
    let resolved = json(seeded.join("config.json"));
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["attack"]["seed"], 9);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let model_dir = dir.path().join("model");
    let out = camo(&[
        "train-detector",
        "--config",
        cfg,
        "--out",
        model_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(model_dir.join("detector.bin").exists());
    let report = json(model_dir.join("train-detector_summary.json"));
    assert!(report["report"]["validation_ap"].as_f64().unwrap() > 0.0);

    let run = |name: &str| -> PathBuf {
        let out_dir = dir.path().join(name);
        let o = out_dir.to_str().unwrap();
        let out = camo(&["attack", "--config", cfg, "--out", o, "--deterministic"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let texture = format!("adv={}", out_dir.join("texture.json").display());
        let out = camo(&[
            "evaluate",
            "--config",
            cfg,
            "--out",
            o,
            "--deterministic",
            "--texture",
            &texture,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for file in [
        "attack_summary.json",
        "evaluate_summary.json",
        "texture.json",
        "attack_log.csv",
        "report.csv",
    ] {
        assert_eq!(
            read(a.join(file)),
            read(b.join(file)),
            "{file} differs between reruns"
        );
    }
    let summary = json(a.join("attack_summary.json"));
    assert_eq!(summary["iterations"], 4);
    assert!(a
        .join("checkpoints")
        .join("checkpoint_000004.json")
        .exists());
    let csv = read(a.join("report.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Raw,white_box,"));
    assert!(lines[2].starts_with("adv,white_box,"));

    // Resuming from the final checkpoint adds nothing.
    let checkpoint = a.join("checkpoints").join("checkpoint_000004.json");
    let resumed = dir.path().join("resumed");
    let out = camo(&[
        "attack",
        "--config",
        cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        checkpoint.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        read(resumed.join("texture.json")),
        read(a.join("texture.json"))
    );

    let sweep_dir = dir.path().join("sweep");
    let out = camo(&[
        "sweep",
        "--config",
        cfg,
        "--out",
        sweep_dir.to_str().unwrap(),
        "--axis",
        "loss_items",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = read(sweep_dir.join("sweep_loss_items.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "loss_items,effective_k,model,ap,asr");
    assert!(rows[1].starts_with("Raw,,white_box,") && rows[1].ends_with(",0.000000"));
    let labels: Vec<&str> = rows[2..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, vec!["FAS", "BAA", "FAS+BAA"]);
    let out = camo(&[
        "sweep",
        "--config",
        cfg,
        "--out",
        sweep_dir.to_str().unwrap(),
        "--axis",
        "gamma",
    ]);
    assert_eq!(code(&out), 2);

    let heat_dir = dir.path().join("heat");
    let texture = a.join("texture.json");
    let out = camo(&[
        "export-heatmaps",
        "--config",
        cfg,
        "--out",
        heat_dir.to_str().unwrap(),
        "--texture",
        texture.to_str().unwrap(),
        "--count",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = json(heat_dir.join("export-heatmaps_summary.json"));
    let files = summary["files"].as_array().unwrap();
    assert_eq!(files.len(), 2 * 4);
    for f in files {
        assert!(heat_dir.join("heatmaps").join(f.as_str().unwrap()).exists());
    }
}
