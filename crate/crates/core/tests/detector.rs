use camo::config::RunConfig;
use camo::dataset::detector_samples;
use camo::detector::{
    decode_weights, encode_weights, iou, load_weights, load_weights_expect, save_weights,
    train_detector, Architecture, BBox, DetectorModel, ForwardPass, GroundTruth, HeadOutput,
    HeadSpec, ScoreMode, TrainOptions,
};
use camo::scene::{make_locations, prepare_scenes, scene_specs, CameraPose};
use camo::Error;
use diffcore::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn random_image(size: usize, seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![3, size, size],
        (0..3 * size * size).map(|_| rng.gen()).collect(),
    )
    .unwrap()
}

/// A one-head pass over a `1 × cells` grid with the given raw outputs,
/// laid out channel-major.
fn pass_from_raw<'t>(tape: &'t Tape, raw: Vec<f64>) -> ForwardPass<'t> {
    let cells = raw.len() / 6;
    let spec = HeadSpec {
        source: 0,
        stride: 8,
        anchor: 28.0,
    };
    ForwardPass {
        heads: vec![HeadOutput {
            spec,
            rows: 1,
            cols: cells,
            raw: tape.leaf(Tensor::new(vec![1, 6, 1, cells], raw).unwrap(), true),
        }],
        activations: vec![],
        image_size: (8, 8 * cells),
    }
}

fn raw_scores(obj: &[f64], cls: &[f64]) -> Vec<f64> {
    let mut raw = vec![0.0; 4 * obj.len()];
    raw.extend(obj.iter().map(|p| logit(*p)));
    raw.extend(cls.iter().map(|p| logit(*p)));
    raw
}

#[test]
fn detection_count_follows_the_grids() {
    let image = random_image(128, 1);
    for arch in [Architecture::ArchA, Architecture::ArchB] {
        let dets = DetectorModel::init(arch, 1).detect(&image).unwrap();
        assert_eq!(dets.len(), 16 * 16 + 8 * 8, "{arch:?}");
        assert!(dets.iter().all(|d| d.bbox.w >= 0.0 && d.bbox.h >= 0.0));
        assert!(dets
            .iter()
            .all(|d| (0.0..=1.0).contains(&d.objectness) && (0.0..=1.0).contains(&d.class_prob)));
    }
}

#[test]
fn zero_weights_give_even_odds() {
    let dets = DetectorModel::zeros(Architecture::ArchA)
        .detect(&random_image(64, 2))
        .unwrap();
    assert!(dets
        .iter()
        .all(|d| d.objectness == 0.5 && d.class_prob == 0.5));
}

#[test]
fn forward_is_deterministic_and_checks_size() {
    let model = DetectorModel::init(Architecture::ArchB, 3);
    let image = random_image(64, 3);
    assert_eq!(model.detect(&image).unwrap(), model.detect(&image).unwrap());
    assert!(model.detect(&random_image(100, 3)).is_err());
    let tape = Tape::new();
    let pass = model.forward(tape.constant(image)).unwrap();
    let names: Vec<&str> = pass.activations.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, vec!["block2", "block4", "block5"]);
    assert!(pass.activation("nope").is_err());
}

#[test]
fn one_stage_score_is_the_best_sum() {
    let tape = Tape::new();
    let pass = pass_from_raw(&tape, raw_scores(&[0.9, 0.2], &[0.8, 0.95]));
    let y = pass.select_yc(ScoreMode::OneStage, None).unwrap();
    assert!((y.item() - 1.7).abs() < 1e-12);
}

#[test]
fn ties_pick_the_first_detection() {
    let tape = Tape::new();
    let pass = pass_from_raw(&tape, vec![0.0; 18]);
    let y = pass.select_yc(ScoreMode::OneStage, None).unwrap();
    assert_eq!(y.item(), 1.0);
    let raw = pass.heads[0].raw;
    let g = tape.grad(y, &[raw], false).unwrap().remove(0).unwrap();
    let nonzero: Vec<usize> = g
        .value()
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    // objectness and class channels of cell 0
    assert_eq!(nonzero, vec![12, 15]);
}

#[test]
fn two_stage_score_uses_box_overlap() {
    let tape = Tape::new();
    let mut raw = vec![0.0; 6];
    raw[5] = logit(0.6);
    let pass = pass_from_raw(&tape, raw);
    let gt = GroundTruth {
        bbox: BBox {
            cx: 4.0,
            cy: 4.0,
            w: 28.0,
            h: 28.0,
        },
    };
    let y = pass.select_yc(ScoreMode::TwoStage, Some(&gt)).unwrap();
    assert!((y.item() - 1.6).abs() < 1e-12);
    assert!(pass.select_yc(ScoreMode::TwoStage, None).is_err());
}

#[test]
fn iou_examples() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
    assert!((iou(&a, &BBox::from_corners(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    let empty = BBox::from_corners(1.0, 1.0, 1.0, 1.0);
    assert_eq!(iou(&empty, &empty), 0.0);
}

#[test]
fn score_gradient_matches_finite_differences() {
    let size = 32;
    let image = random_image(size, 11);
    let gt = GroundTruth {
        bbox: BBox::from_corners(6.0, 8.0, 26.0, 22.0),
    };
    for mode in [ScoreMode::OneStage, ScoreMode::TwoStage] {
        let model = DetectorModel::init(Architecture::ArchA, 5).with_score_mode(mode);
        let score = |img: &Tensor| {
            let tape = Tape::new();
            let pass = model.forward(tape.constant(img.clone())).unwrap();
            pass.select_yc(mode, Some(&gt)).unwrap().item()
        };
        let tape = Tape::new();
        let x = tape.leaf(image.clone(), true);
        let y = model
            .forward(x)
            .unwrap()
            .select_yc(mode, Some(&gt))
            .unwrap();
        let g = tape.grad(y, &[x], false).unwrap().remove(0).unwrap();
        let h = 1e-6;
        for j in (0..image.len()).step_by(37) {
            let mut plus = image.clone();
            plus.data_mut()[j] += h;
            let mut minus = image.clone();
            minus.data_mut()[j] -= h;
            let numeric = (score(&plus) - score(&minus)) / (2.0 * h);
            let analytic = g.value().data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{mode:?} pixel {j}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn every_centre_has_a_usable_prior() {
    let heads = Architecture::ArchA.heads();
    let head = heads.iter().find(|h| h.stride == 8).unwrap();
    let size = 128.0;
    let cells = (size as usize) / head.stride;
    for side in [20.0, 28.0, 40.0] {
        let mut worst = f64::INFINITY;
        let mut cy = 0.0;
        while cy <= size {
            let mut cx = 0.0;
            while cx <= size {
                let gt = BBox {
                    cx,
                    cy,
                    w: side,
                    h: side,
                };
                let best = (0..cells * cells)
                    .map(|i| {
                        let s = head.stride as f64;
                        let prior = BBox {
                            cx: ((i % cells) as f64 + 0.5) * s,
                            cy: ((i / cells) as f64 + 0.5) * s,
                            w: head.anchor,
                            h: head.anchor,
                        };
                        iou(&prior, &gt)
                    })
                    .fold(0.0, f64::max);
                worst = worst.min(best);
                cx += 0.5;
            }
            cy += 0.5;
        }
        assert!(
            worst >= 0.3,
            "box side {side}: worst best-prior IoU {worst}"
        );
    }
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = DetectorModel::init(Architecture::ArchB, 9).with_score_mode(ScoreMode::TwoStage);
    save_weights(&model, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, model);
    let probe = random_image(64, 4);
    assert_eq!(model.detect(&probe).unwrap(), back.detect(&probe).unwrap());

    let mut bytes = encode_weights(&model);
    assert_eq!(decode_weights(&bytes).unwrap(), model);
    let truncated = &bytes[..bytes.len() - 5];
    assert!(matches!(decode_weights(truncated), Err(Error::Weights(_))));
    bytes[0] ^= 0xff;
    let err = decode_weights(&bytes).unwrap_err();
    assert!(err.to_string().contains("bad header"), "{err}");

    let err = load_weights_expect(&path, Architecture::ArchA).unwrap_err();
    assert!(err.to_string().contains("architecture mismatch"), "{err}");
    assert!(load_weights_expect(&path, Architecture::ArchB).is_ok());
}

fn tiny_training_set() -> Vec<camo::detector::TrainSample> {
    let mesh = {
        let mut m = camo::scene::procedural_vehicle();
        m.sample_upper_fraction(0.6).unwrap();
        m
    };
    let poses: Vec<CameraPose> = [0.0, 60.0, 120.0, 200.0, 290.0]
        .iter()
        .map(|&y| CameraPose::new(6.0, 70.0, y))
        .collect();
    let scenes = prepare_scenes(
        &mesh,
        &scene_specs(&poses, &make_locations(2, 3, 1.0), 60.0, 64),
    )
    .unwrap();
    detector_samples(&scenes, 1, 3, true).unwrap()
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_training_set();
    let options = TrainOptions {
        epochs: 2,
        batch_size: 4,
        min_ap: 0.0,
        ..TrainOptions::default()
    };
    let (a, ra) = train_detector(Architecture::ArchA, &data, 1, &options).unwrap();
    let (b, rb) = train_detector(Architecture::ArchA, &data, 1, &options).unwrap();
    assert_eq!(encode_weights(&a), encode_weights(&b));
    assert_eq!(ra, rb);
    let (c, _) = train_detector(Architecture::ArchA, &data, 2, &options).unwrap();
    assert_ne!(encode_weights(&a), encode_weights(&c));
    assert_eq!(ra.train_size + ra.validation_size, data.len());
}

#[test]
fn training_preconditions() {
    let options = TrainOptions::default();
    assert!(train_detector(Architecture::ArchA, &[], 1, &options).is_err());
    let data = tiny_training_set();
    let hopeless = TrainOptions {
        epochs: 1,
        min_ap: 1.5,
        ..TrainOptions::default()
    };
    let err = train_detector(Architecture::ArchA, &data, 1, &hopeless).unwrap_err();
    assert!(matches!(err, Error::TrainingBudget { .. }));
    assert!(err.to_string().contains("increase"));
}

#[test]
fn config_training_keeps_the_score_mode() {
    let mut cfg = RunConfig::with_seed(4);
    cfg.scene.image_size = 32;
    cfg.scene.mesh = None;
    cfg.detector.train_scenes = 6;
    cfg.detector.score_mode = ScoreMode::TwoStage;
    cfg.detector.train = TrainOptions {
        epochs: 1,
        min_ap: 0.0,
        ..TrainOptions::default()
    };
    let mesh = cfg.mesh().unwrap();
    let (model, report) = cfg.train_detector(&mesh).unwrap();
    assert_eq!(model.score_mode, ScoreMode::TwoStage);
    assert!(report.train_size > 0);
}

proptest! {
    #[test]
    fn score_is_monotone_in_every_probability(
        obj in prop::collection::vec(0.01f64..0.99, 4),
        cls in prop::collection::vec(0.01f64..0.99, 4),
        which in 0usize..8,
        bump in 0.0f64..3.0,
    ) {
        let tape = Tape::new();
        let base = raw_scores(&obj, &cls);
        let y0 = pass_from_raw(&tape, base.clone()).select_yc(ScoreMode::OneStage, None).unwrap().item();
        let mut raised = base;
        raised[16 + which] += bump;
        let y1 = pass_from_raw(&tape, raised).select_yc(ScoreMode::OneStage, None).unwrap().item();
        prop_assert!(y1 >= y0);
    }
}
