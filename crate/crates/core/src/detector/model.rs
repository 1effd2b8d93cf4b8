use std::sync::Arc;

use diffcore::{ConvGeom, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BBox, Detection, GroundTruth};
use crate::error::{Error, Result};

const LEAK: f64 = 0.1;
/// Per-cell outputs: tx, ty, tw, th, objectness logit, class logit.
pub const CELL_OUTPUTS: usize = 6;
const HEAD_HIDDEN: usize = 32;
/// Objectness bias at init, so early training is not swamped by negatives.
const OBJ_PRIOR_BIAS: f64 = -4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "arch-a-v1")]
    ArchA,
    #[serde(rename = "arch-b-v1")]
    ArchB,
}

/// How the attack score is read off the detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `max(C_obj + P_cls)`
    #[default]
    OneStage,
    /// `max(P_cls + IoU(box, ground truth))`
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    /// Backbone block feeding the head.
    pub source: usize,
    pub stride: usize,
    /// Side of the square prior box, pixels.
    pub anchor: f64,
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::ArchA => "arch-a-v1",
            Architecture::ArchB => "arch-b-v1",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "arch-a-v1" => Ok(Architecture::ArchA),
            "arch-b-v1" => Ok(Architecture::ArchB),
            other => Err(Error::Invalid(format!("unknown architecture id {other:?}"))),
        }
    }

    fn blocks(&self) -> Vec<ConvSpec> {
        let c = |cin, cout, stride| ConvSpec { cin, cout, stride };
        match self {
            Architecture::ArchA => vec![c(3, 16, 2), c(16, 32, 2), c(32, 64, 2), c(64, 64, 2)],
            Architecture::ArchB => vec![
                c(3, 8, 2),
                c(8, 24, 2),
                c(24, 48, 2),
                c(48, 96, 1),
                c(96, 96, 2),
            ],
        }
    }

    pub fn heads(&self) -> Vec<HeadSpec> {
        let (s8, s16) = match self {
            Architecture::ArchA => (2, 3),
            Architecture::ArchB => (3, 4),
        };
        vec![
            HeadSpec {
                source: s8,
                stride: 8,
                anchor: 28.0,
            },
            HeadSpec {
                source: s16,
                stride: 16,
                anchor: 56.0,
            },
        ]
    }

    /// Named attention layers `(name, block, stride)`: each head's input,
    /// plus a stride-4 scale for arch-B.
    pub fn attention_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = Vec::new();
        if *self == Architecture::ArchB {
            layers.push(("block2".to_string(), 1, 4));
        }
        for h in self.heads() {
            layers.push((format!("block{}", h.source + 1), h.source, h.stride));
        }
        layers
    }

    pub fn max_stride(&self) -> usize {
        self.heads().iter().map(|h| h.stride).max().unwrap_or(1)
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let blocks = self.blocks();
        for b in &blocks {
            shapes.push(vec![b.cout, b.cin, 3, 3]);
            shapes.push(vec![b.cout]);
        }
        for h in self.heads() {
            let cin = blocks[h.source].cout;
            shapes.push(vec![HEAD_HIDDEN, cin, 3, 3]);
            shapes.push(vec![HEAD_HIDDEN]);
            shapes.push(vec![CELL_OUTPUTS, HEAD_HIDDEN, 1, 1]);
            shapes.push(vec![CELL_OUTPUTS]);
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub arch: Architecture,
    pub score_mode: ScoreMode,
    pub params: Vec<Arc<Tensor>>,
}

impl DetectorModel {
    /// He-normal kernels, zero biases except the objectness prior.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let he = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive spread");
                    (0..n).map(|_| he.sample(&mut rng)).collect()
                } else {
                    let mut b = vec![0.0; n];
                    // last bias of each head: objectness channel
                    if n == CELL_OUTPUTS && i % 4 == 3 {
                        b[4] = OBJ_PRIOR_BIAS;
                    }
                    b
                };
                Arc::new(Tensor::new(shape, data).expect("shape matches data"))
            })
            .collect();
        Self {
            arch,
            score_mode: ScoreMode::OneStage,
            params,
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            score_mode: ScoreMode::OneStage,
            params: arch
                .param_shapes()
                .iter()
                .map(|s| Arc::new(Tensor::zeros(s)))
                .collect(),
        }
    }

    pub fn with_score_mode(mut self, mode: ScoreMode) -> Self {
        self.score_mode = mode;
        self
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf_arc(p.clone(), trainable))
            .collect()
    }

    /// Forward pass on a `[3, H, W]` image with constant parameters.
    pub fn forward<'t>(&self, image: Var<'t>) -> Result<ForwardPass<'t>> {
        let params = self.bind(image.tape(), false);
        self.forward_with(image, &params)
    }

    pub fn forward_with<'t>(&self, image: Var<'t>, params: &[Var<'t>]) -> Result<ForwardPass<'t>> {
        let shape = image.shape();
        let [3, h, w] = shape[..] else {
            return Err(Error::Invalid(format!(
                "detector input must be [3, H, W], got {shape:?}"
            )));
        };
        let max_stride = self.arch.max_stride();
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::Invalid(format!(
                "image {h}x{w} is not divisible by the largest stride {max_stride}"
            )));
        }
        let blocks = self.arch.blocks();
        let mut feats = Vec::with_capacity(blocks.len());
        let mut x = image.add_scalar(-0.5).reshape(&[1, 3, h, w])?;
        for (i, b) in blocks.iter().enumerate() {
            x = x
                .conv2d(params[2 * i], ConvGeom::new(b.stride, 1))?
                .add_channel_bias(params[2 * i + 1])?
                .leaky_relu(LEAK);
            feats.push(x);
        }
        let mut heads = Vec::new();
        let base = 2 * blocks.len();
        for (k, spec) in self.arch.heads().into_iter().enumerate() {
            let p = &params[base + 4 * k..base + 4 * k + 4];
            let hidden = feats[spec.source]
                .conv2d(p[0], ConvGeom::new(1, 1))?
                .add_channel_bias(p[1])?
                .leaky_relu(LEAK);
            let raw = hidden
                .conv2d(p[2], ConvGeom::new(1, 0))?
                .add_channel_bias(p[3])?;
            heads.push(HeadOutput {
                spec,
                rows: h / spec.stride,
                cols: w / spec.stride,
                raw,
            });
        }
        let activations = self
            .arch
            .attention_layers()
            .into_iter()
            .map(|(name, block, stride)| Activation {
                name,
                stride,
                value: feats[block],
            })
            .collect();
        Ok(ForwardPass {
            heads,
            activations,
            image_size: (h, w),
        })
    }

    /// Value-level detections for an image (no tape kept).
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        Ok(self.forward(x)?.detections())
    }
}

#[derive(Debug, Clone)]
pub struct HeadOutput<'t> {
    pub spec: HeadSpec,
    pub rows: usize,
    pub cols: usize,
    /// `[1, 6, rows, cols]` raw outputs.
    pub raw: Var<'t>,
}

impl<'t> HeadOutput<'t> {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// One output channel over all cells, row-major.
    pub fn channel(&self, ch: usize) -> Result<Var<'t>> {
        let n = self.cells();
        Ok(self.raw.gather((ch * n..(ch + 1) * n).collect())?)
    }

    fn grid(&self, horizontal: bool) -> Tensor {
        Tensor::from_vec(
            (0..self.cells())
                .map(|i| {
                    if horizontal {
                        (i % self.cols) as f64
                    } else {
                        (i / self.cols) as f64
                    }
                })
                .collect(),
        )
    }

    /// Differentiable box corners `(x0, y0, x1, y1)` per cell.
    fn corners(&self) -> Result<[Var<'t>; 4]> {
        let s = self.spec.stride as f64;
        let cx = self
            .channel(0)?
            .sigmoid()
            .add_const(&self.grid(true))?
            .scale(s);
        let cy = self
            .channel(1)?
            .sigmoid()
            .add_const(&self.grid(false))?
            .scale(s);
        let hw = self.channel(2)?.exp().scale(self.spec.anchor / 2.0);
        let hh = self.channel(3)?.exp().scale(self.spec.anchor / 2.0);
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    }

    /// Differentiable IoU of every cell's box with `gt`.
    pub fn iou_with(&self, gt: &BBox) -> Result<Var<'t>> {
        let [x0, y0, x1, y1] = self.corners()?;
        let tape = self.raw.tape();
        let n = self.cells();
        let (gx0, gy0, gx1, gy1) = gt.corners();
        let c = |v: f64| tape.constant(Tensor::full(&[n], v));
        let iw = x1.minimum(c(gx1))?.sub(x0.maximum(c(gx0))?)?.relu();
        let ih = y1.minimum(c(gy1))?.sub(y0.maximum(c(gy0))?)?.relu();
        let inter = iw.mul(ih)?;
        let area = x1.sub(x0)?.mul(y1.sub(y0)?)?;
        let union = area.add_scalar(gt.area()).sub(inter)?;
        Ok(inter.div(union)?)
    }
}

#[derive(Debug, Clone)]
pub struct Activation<'t> {
    pub name: String,
    pub stride: usize,
    /// `[1, C, h, w]`
    pub value: Var<'t>,
}

/// Outputs of one forward pass, recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass<'t> {
    pub heads: Vec<HeadOutput<'t>>,
    pub activations: Vec<Activation<'t>>,
    pub image_size: (usize, usize),
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl<'t> ForwardPass<'t> {
    pub fn num_detections(&self) -> usize {
        self.heads.iter().map(|h| h.cells()).sum()
    }

    /// One detection per cell per head (stride-8 head first, row-major).
    pub fn detections(&self) -> Vec<Detection> {
        let mut out = Vec::with_capacity(self.num_detections());
        for head in &self.heads {
            let raw = head.raw.value();
            let n = head.cells();
            let s = head.spec.stride as f64;
            let at = |ch: usize, i: usize| raw.data()[ch * n + i];
            for i in 0..n {
                let (gy, gx) = ((i / head.cols) as f64, (i % head.cols) as f64);
                out.push(Detection {
                    bbox: BBox {
                        cx: (gx + sigmoid(at(0, i))) * s,
                        cy: (gy + sigmoid(at(1, i))) * s,
                        w: head.spec.anchor * at(2, i).clamp(-6.0, 6.0).exp(),
                        h: head.spec.anchor * at(3, i).clamp(-6.0, 6.0).exp(),
                    },
                    objectness: sigmoid(at(4, i)),
                    class_prob: sigmoid(at(5, i)),
                });
            }
        }
        out
    }

    pub fn activation(&self, name: &str) -> Result<&Activation<'t>> {
        self.activations
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown attention layer {name:?}")))
    }

    /// Per-detection score vector for `mode`, concatenated across heads.
    pub fn score_vector(&self, mode: ScoreMode, gt: Option<&GroundTruth>) -> Result<Var<'t>> {
        let mut parts = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let cls = head.channel(5)?.sigmoid();
            let v = match mode {
                ScoreMode::OneStage => head.channel(4)?.sigmoid().add(cls)?,
                ScoreMode::TwoStage => {
                    let gt = gt.ok_or_else(|| {
                        Error::Invalid("two-stage score needs a ground-truth box".into())
                    })?;
                    cls.add(head.iou_with(&gt.bbox)?)?
                }
            };
            parts.push(v);
        }
        Ok(Var::concat(&parts)?)
    }

    /// The attack score `y_c`: maximum of the per-detection scores, no
    /// suppression. Ties pick the lowest detection index.
    pub fn select_yc(&self, mode: ScoreMode, gt: Option<&GroundTruth>) -> Result<Var<'t>> {
        Ok(self.score_vector(mode, gt)?.max()?)
    }
}
