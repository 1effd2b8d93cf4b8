//! Gradient-weighted attention maps averaged over transformed views and
//! split into object and background parts.

mod transform;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use diffcore::{bilinear_resize_map, SparseLinear, Tensor, Var};

pub use transform::{
    apply_transform, inverse_align, transform_var, BaseTransform, TransformSpec, MAX_SCALE,
    MAX_SHIFT_FRACTION, MIN_SCALE,
};

use crate::detector::{DetectorModel, GroundTruth};
use crate::error::{Error, Result};
use crate::image_io::{heatmap, Image};

/// Floor on the range in min–max normalization.
pub const NORM_FLOOR: f64 = 1e-8;

/// Gradient-weighted activation map of one layer:
/// `ReLU(Σ_k w_k A^k)` with `w_k` the spatial mean of `∂y_c/∂A^k`.
/// `activation` is `[1, C, h, w]` (or `[C, h, w]`); the result is `[h, w]`
/// and stays on the tape, so it can itself be differentiated.
pub fn gradcam_layer<'t>(activation: Var<'t>, y_c: Var<'t>) -> Result<Var<'t>> {
    Ok(gradcam_layers(&[activation], y_c)?.remove(0))
}

/// [`gradcam_layer`] for several layers sharing one backward sweep.
pub fn gradcam_layers<'t>(activations: &[Var<'t>], y_c: Var<'t>) -> Result<Vec<Var<'t>>> {
    let dims = activations
        .iter()
        .map(|a| {
            let shape = a.shape();
            match shape[..] {
                [1, c, h, w] | [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Invalid(format!(
                    "attention layer must be [1, C, h, w], got {shape:?}"
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let tape = y_c.tape();
    let grads = tape.grad(y_c, activations, true)?;
    let mut maps = Vec::with_capacity(activations.len());
    for ((a, g), (c, h, w)) in activations.iter().zip(grads).zip(dims) {
        maps.push(match g {
            Some(g) => {
                let weights = g
                    .reshape(&[c, h * w])?
                    .sum_axis(1)?
                    .scale(1.0 / (h * w) as f64);
                gradcam_from_weights(*a, weights)?
            }
            None => tape.constant(Tensor::zeros(&[h, w])),
        });
    }
    Ok(maps)
}

/// `ReLU(Σ_k w_k A^k)` for given channel weights `w` (`[C]`).
pub fn gradcam_from_weights<'t>(activation: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let shape = activation.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let c = activation.value().len() / (h * w);
    let a = activation.reshape(&[c, h * w])?;
    let weighted = a.mul(weights.reshape(&[c])?.broadcast_axis(1, h * w)?)?;
    Ok(weighted.sum_axis(0)?.relu().reshape(&[h, w])?)
}

/// Min–max normalization to `[0, 1]` with a floored range.
pub fn normalize<'t>(map: Var<'t>) -> Result<Var<'t>> {
    let shape = map.shape();
    let lo = map.min()?;
    let hi = map.max()?;
    let range = hi.sub(lo)?.value().item();
    let shifted = map.sub(lo.expand(&shape)?)?;
    if range < NORM_FLOOR {
        Ok(shifted.scale(1.0 / NORM_FLOOR))
    } else {
        Ok(shifted.div(hi.sub(lo)?.expand(&shape)?)?)
    }
}

/// Per-layer attention maps averaged over views, plus the split by the
/// object mask. All maps are flat `H·W` vectors at input resolution.
#[derive(Debug, Clone)]
pub struct AttentionStack<'t> {
    pub size: usize,
    /// Layer names with their normalized averaged maps `S^l`.
    pub layers: Vec<(String, Var<'t>)>,
    /// Aligned per-view maps before averaging, `views[i][l]`.
    pub views: Vec<Vec<Var<'t>>>,
    pub foreground: Var<'t>,
    pub background: Var<'t>,
    pub mask: Arc<Vec<f64>>,
}

impl<'t> AttentionStack<'t> {
    /// Builds `S^f = Σ_l S^l ⊙ m` and `S^b = Σ_l S^l ⊙ (1 − m)`.
    pub fn from_layers(
        size: usize,
        layers: Vec<(String, Var<'t>)>,
        views: Vec<Vec<Var<'t>>>,
        mask: Arc<Vec<f64>>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Invalid("no attention layers".into()))?
            .1;
        if mask.len() != size * size {
            return Err(Error::Invalid(format!(
                "mask of length {} for a {size}x{size} map",
                mask.len()
            )));
        }
        let mut total = first;
        for (_, s) in &layers[1..] {
            total = total.add(*s)?;
        }
        let inverse: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        let foreground = total.mul_const(Tensor::from_vec(mask.to_vec()))?;
        let background = total.mul_const(Tensor::from_vec(inverse))?;
        Ok(Self {
            size,
            layers,
            views,
            foreground,
            background,
            mask,
        })
    }

    /// Sum over layers, `Σ_l S^l` (value only).
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.size * self.size];
        for (_, s) in &self.layers {
            for (o, v) in out.iter_mut().zip(s.value().data()) {
                *o += v;
            }
        }
        out
    }

    /// Writes one false-colour PNG per layer plus the combined map, over
    /// `under` when given. Returns the written paths.
    pub fn export_heatmaps(
        &self,
        dir: &Path,
        prefix: &str,
        under: Option<&Image>,
    ) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut maps: Vec<(String, Vec<f64>)> = self
            .layers
            .iter()
            .map(|(name, s)| (name.clone(), s.value().data().to_vec()))
            .collect();
        let total = self.total();
        let peak = total.iter().cloned().fold(0.0, f64::max).max(NORM_FLOOR);
        maps.push(("combined".into(), total.iter().map(|v| v / peak).collect()));
        for (name, map) in maps {
            let path = dir.join(format!("{prefix}_{name}.png"));
            heatmap(&map, self.size, self.size, under).save_png(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Caches the fixed resampling maps used while building attention stacks.
#[derive(Debug, Default)]
pub struct ResampleCache {
    resize: HashMap<(usize, usize, usize), Arc<SparseLinear>>,
}

impl ResampleCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn resize(&mut self, h: usize, w: usize, size: usize) -> Arc<SparseLinear> {
        self.resize
            .entry((h, w, size))
            .or_insert_with(|| Arc::new(bilinear_resize_map(h, w, size, size)))
            .clone()
    }
}

/// Averaged attention of `image` (`[3, H, W]`, on the tape) over the
/// identity view and each spec in `specs`: per layer,
/// `S^l = norm((1/(p+1)) Σ_i t̂_i(up(s_i^l)))`, then split by `mask`.
/// `truth` is the box in the untransformed frame; each view scores
/// against its transformed copy.
pub fn averaged_attention<'t>(
    model: &DetectorModel,
    image: Var<'t>,
    mask: Arc<Vec<f64>>,
    specs: &[TransformSpec],
    truth: Option<&GroundTruth>,
    normalized: bool,
    cache: &mut ResampleCache,
) -> Result<AttentionStack<'t>> {
    let size = transform::square_side(&image.shape())?;
    let params = model.bind(image.tape(), false);
    let layer_names: Vec<String> = model
        .arch
        .attention_layers()
        .into_iter()
        .map(|(name, _, _)| name)
        .collect();
    let mut views: Vec<Vec<Var<'t>>> = Vec::with_capacity(specs.len() + 1);
    let identity = TransformSpec::identity();
    for spec in std::iter::once(&identity).chain(specs) {
        let (x, back) = if spec.steps.is_empty() {
            (image, None)
        } else {
            let forward = Arc::new(spec.plane_map(size)?);
            let back = Arc::new(spec.inverse().plane_map(size)?);
            (transform_var(image, &forward)?, Some(back))
        };
        let moved_truth = truth.map(|t| GroundTruth {
            bbox: spec.map_box(&t.bbox, size),
        });
        let pass = model.forward_with(x, &params)?;
        let y_c = pass.select_yc(model.score_mode, moved_truth.as_ref())?;
        let acts = layer_names
            .iter()
            .map(|name| Ok(pass.activation(name)?.value))
            .collect::<Result<Vec<_>>>()?;
        let mut aligned = Vec::with_capacity(layer_names.len());
        for raw in gradcam_layers(&acts, y_c)? {
            let shape = raw.shape();
            let up = raw.linear_arc(cache.resize(shape[0], shape[1], size), false)?;
            aligned.push(match &back {
                Some(b) => up.linear_arc(b.clone(), false)?,
                None => up,
            });
        }
        views.push(aligned);
    }
    let count = views.len() as f64;
    let mut layers = Vec::with_capacity(layer_names.len());
    for (l, name) in layer_names.iter().enumerate() {
        let mut sum = views[0][l];
        for v in &views[1..] {
            sum = sum.add(v[l])?;
        }
        let mean = sum.scale(1.0 / count);
        layers.push((
            name.clone(),
            if normalized { normalize(mean)? } else { mean },
        ));
    }
    AttentionStack::from_layers(size, layers, views, mask)
}
