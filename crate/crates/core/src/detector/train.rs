use std::sync::Arc;

use diffcore::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::HeadOutput;
use super::{iou, Architecture, BBox, DetectorModel, GroundTruth};
use crate::dataset::training_texture;
use crate::error::{Error, Result};
use crate::evaluate::{average_precision, nms, MATCH_IOU, NMS_IOU};
use crate::scene::PreparedScene;

/// Decoded boxes overlapping the truth at least this much are not pushed
/// towards background.
const IGNORE_IOU: f64 = 0.5;
const BOX_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Every `holdout_every`-th sample is held out for validation.
    pub holdout_every: usize,
    /// Validation AP the trained model must reach.
    pub min_ap: f64,
    pub flip_augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            holdout_every: 5,
            min_ap: 0.85,
            flip_augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub validation_ap: f64,
    pub train_size: usize,
    pub validation_size: usize,
}

/// One training example: a `[3, H, W]` image and its box. Samples that
/// keep their scene are repainted with a fresh texture every epoch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Arc<Tensor>,
    pub truth: GroundTruth,
    pub scene: Option<Arc<PreparedScene>>,
}

impl TrainSample {
    fn draw<R: Rng>(&self, rng: &mut R) -> Result<Tensor> {
        match &self.scene {
            Some(scene) => {
                let faces = scene.fragments.num_sampled();
                let texture = training_texture(faces, rng);
                Ok(scene.render(&texture)?.image.to_tensor())
            }
            None => Ok((*self.image).clone()),
        }
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DetectorModel) -> Self {
        let zeros = || model.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DetectorModel, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in model.params.iter_mut().enumerate() {
            let p = Arc::make_mut(p);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                self.m[i][j] = Self::B1 * self.m[i][j] + (1.0 - Self::B1) * g;
                self.v[i][j] = Self::B2 * self.v[i][j] + (1.0 - Self::B2) * g * g;
                *w -= lr * (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Mirrors a `[3, H, W]` image left to right.
pub fn flip_image(image: &Tensor) -> Tensor {
    let shape = image.shape().to_vec();
    let w = shape[shape.len() - 1];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(shape, data).expect("same shape")
}

fn head_loss<'t>(head: &HeadOutput<'t>, truth: &BBox) -> Result<Var<'t>> {
    let n = head.cells();
    let s = head.spec.stride as f64;
    let raw = head.raw.value();
    let at = |ch: usize, i: usize| raw.data()[ch * n + i];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

    // the responsible cell holds the box center
    let gx = ((truth.cx / s).floor() as usize).min(head.cols - 1);
    let gy = ((truth.cy / s).floor() as usize).min(head.rows - 1);
    let pos = gy * head.cols + gx;

    let mut weight = vec![1.0; n];
    for (i, w) in weight.iter_mut().enumerate() {
        if i == pos {
            continue;
        }
        let b = BBox {
            cx: ((i % head.cols) as f64 + sig(at(0, i))) * s,
            cy: ((i / head.cols) as f64 + sig(at(1, i))) * s,
            w: head.spec.anchor * at(2, i).clamp(-6.0, 6.0).exp(),
            h: head.spec.anchor * at(3, i).clamp(-6.0, 6.0).exp(),
        };
        if iou(&b, truth) > IGNORE_IOU {
            *w = 0.0;
        }
    }
    let mut target = vec![0.0; n];
    target[pos] = 1.0;

    // binary cross-entropy with logits: softplus(z) - y z
    let obj = head.channel(4)?;
    let obj_loss = obj
        .softplus()
        .mul_const(Tensor::from_vec(weight))?
        .sum()
        .sub(obj.mul_const(Tensor::from_vec(target))?.sum())?;

    let cell = |ch: usize| -> Result<Var<'t>> { Ok(head.raw.gather(vec![ch * n + pos])?.sum()) };
    let cls_loss = cell(5)?.neg().softplus();
    let tx = truth.cx / s - gx as f64;
    let ty = truth.cy / s - gy as f64;
    let tw = (truth.w.max(1.0) / head.spec.anchor).ln();
    let th = (truth.h.max(1.0) / head.spec.anchor).ln();
    let sq = |v: Var<'t>, t: f64| -> Result<Var<'t>> {
        let d = v.add_scalar(-t);
        Ok(d.mul(d)?)
    };
    let box_loss = sq(cell(0)?.sigmoid(), tx)?
        .add(sq(cell(1)?.sigmoid(), ty)?)?
        .add(sq(cell(2)?, tw)?)?
        .add(sq(cell(3)?, th)?)?
        .scale(BOX_WEIGHT);
    Ok(obj_loss.add(cls_loss)?.add(box_loss)?)
}

/// Index of the head whose prior box best fits `truth`.
fn responsible_head(model: &DetectorModel, truth: &BBox) -> usize {
    let fit = |anchor: f64| {
        let inter = truth.w.min(anchor) * truth.h.min(anchor);
        inter / (truth.area() + anchor * anchor - inter)
    };
    let heads = model.arch.heads();
    let mut best = 0;
    for (i, h) in heads.iter().enumerate() {
        if fit(h.anchor) > fit(heads[best].anchor) {
            best = i;
        }
    }
    best
}

/// Detection loss of one image and its parameter gradients.
pub fn sample_loss(
    model: &DetectorModel,
    image: &Tensor,
    truth: &BBox,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let params = model.bind(&tape, true);
    let x = tape.constant(image.clone());
    let pass = model.forward_with(x, &params)?;
    let responsible = responsible_head(model, truth);
    let mut loss = tape.scalar(0.0);
    for (k, head) in pass.heads.iter().enumerate() {
        if k == responsible {
            loss = loss.add(head_loss(head, truth)?)?;
        } else {
            // other scales only learn background objectness
            let obj = head.channel(4)?;
            loss = loss.add(obj.softplus().sum())?;
        }
    }
    let grads = tape.backward(loss)?;
    let flat = params
        .iter()
        .map(|p| {
            grads
                .get(p)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value().len()])
        })
        .collect();
    Ok((loss.item(), flat))
}

/// Clean AP of `model` over `samples`, after suppression.
pub fn clean_ap(model: &DetectorModel, samples: &[TrainSample]) -> Result<f64> {
    let mut dets = Vec::with_capacity(samples.len());
    for s in samples {
        dets.push(nms(&model.detect(&s.image)?, NMS_IOU));
    }
    let truths: Vec<GroundTruth> = samples.iter().map(|s| s.truth).collect();
    Ok(average_precision(&dets, &truths, MATCH_IOU))
}

/// Trains a detector with Adam on `dataset`, holding out every
/// `holdout_every`-th sample for validation. Deterministic given `seed`.
pub fn train_detector(
    arch: Architecture,
    dataset: &[TrainSample],
    seed: u64,
    options: &TrainOptions,
) -> Result<(DetectorModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if options.batch_size == 0 || options.holdout_every < 2 {
        return Err(Error::Invalid(
            "batch size must be positive and holdout stride at least 2".into(),
        ));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in dataset.iter().enumerate() {
        if i % options.holdout_every == options.holdout_every - 1 {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    if val.is_empty() {
        val = train.clone();
    }

    let mut model = DetectorModel::init(arch, seed);
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1e_d00d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(options.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for &i in batch {
                let s = &train[i];
                let image = s.draw(&mut rng)?;
                let flip = options.flip_augment && rng.gen::<bool>();
                let (image, truth) = if flip {
                    let w = image.shape()[2] as f64;
                    (flip_image(&image), s.truth.bbox.flip_horizontal(w))
                } else {
                    (image, s.truth.bbox)
                };
                let (loss, grads) = sample_loss(&model, &image, &truth)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        iteration: adam.t as usize,
                        detail: "detector training loss".into(),
                    });
                }
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y / batch.len() as f64;
                    }
                }
            }
            adam.step(&mut model, &acc, options.learning_rate);
        }
        final_loss = epoch_loss / train.len() as f64;
    }

    let ap = clean_ap(&model, &val)?;
    let report = TrainReport {
        epochs: options.epochs,
        final_loss,
        validation_ap: ap,
        train_size: train.len(),
        validation_size: val.len(),
    };
    if ap < options.min_ap {
        return Err(Error::TrainingBudget {
            ap,
            required: options.min_ap,
            epochs: options.epochs,
        });
    }
    Ok((model, report))
}
