//! Attention, smoothness and printability objectives.

mod palette;

use diffcore::{top_k_indices, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use palette::PrintablePalette;

use crate::attention::AttentionStack;
use crate::error::{Error, Result};
use crate::scene::Mesh;

/// Guard on the ratio denominators.
pub const RATIO_EPS: f64 = 1e-6;
/// Image side at which `k` is specified.
pub const REFERENCE_SIZE: usize = 608;
/// Smallest top-k size after rescaling.
pub const MIN_EFFECTIVE_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Top-k size in pixels of a `REFERENCE_SIZE` image.
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Include the suppression (foreground) term.
    pub use_fas: bool,
    /// Include the amplification (background) term.
    pub use_baa: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 5.0,
            alpha2: 1.0,
            k: 100,
            beta: 0.1,
            gamma: 0.01,
            use_fas: true,
            use_baa: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let values = [self.alpha1, self.alpha2, self.beta, self.gamma];
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.k == 0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with k >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `k` rescaled by pixel count to an image of side `size`:
    /// `round(k (size / 608)²)`, at least [`MIN_EFFECTIVE_K`].
    pub fn effective_k(&self, size: usize) -> usize {
        let ratio = size as f64 / REFERENCE_SIZE as f64;
        ((self.k as f64 * ratio * ratio).round() as usize).max(MIN_EFFECTIVE_K)
    }
}

fn region(mask: &[f64]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, m)| **m != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// `Σ map ⊙ mask / ‖mask‖₀` over a flat map.
pub fn region_mean<'t>(map: Var<'t>, mask: &[f64]) -> Result<Var<'t>> {
    check_len(map, mask)?;
    let count = region(mask).len();
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(map
        .reshape(&[mask.len()])?
        .mul_const(Tensor::from_vec(mask.to_vec()))?
        .sum()
        .scale(1.0 / count as f64))
}

/// Mean of the `k` largest map values inside the mask; `k` is clipped to
/// the region size.
pub fn topk_mean<'t>(map: Var<'t>, mask: &[f64], k: usize) -> Result<Var<'t>> {
    check_len(map, mask)?;
    let candidates = region(mask);
    if candidates.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if k == 0 {
        return Err(Error::Invalid("top-k size must be at least 1".into()));
    }
    let picked = top_k_indices(map.value().data(), &candidates, k);
    let n = picked.len();
    Ok(map
        .reshape(&[mask.len()])?
        .gather(picked)?
        .sum()
        .scale(1.0 / n as f64))
}

fn check_len(map: Var<'_>, mask: &[f64]) -> Result<()> {
    if map.value().len() != mask.len() {
        return Err(Error::Invalid(format!(
            "map of {} values with a mask of {}",
            map.value().len(),
            mask.len()
        )));
    }
    Ok(())
}

/// `α₁·mean + α₂·φ/(mean + ε)` over the masked region.
fn attention_term<'t>(map: Var<'t>, mask: &[f64], w: &LossWeights, k: usize) -> Result<Var<'t>> {
    let mean = region_mean(map, mask)?;
    let phi = topk_mean(map, mask, k)?;
    let ratio = phi.div(mean.add_scalar(RATIO_EPS))?;
    Ok(mean.scale(w.alpha1).add(ratio.scale(w.alpha2))?)
}

/// Foreground suppression and background amplification terms. An empty
/// background gives `L_BAA = 0`; an empty foreground is an error.
pub fn fas_baa<'t>(
    stack: &AttentionStack<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, Var<'t>)> {
    let k = weights.effective_k(stack.size);
    let fg: &[f64] = &stack.mask;
    let bg: Vec<f64> = fg.iter().map(|m| 1.0 - m).collect();
    let fas = attention_term(stack.foreground, fg, weights, k)?;
    let tape = fas.tape();
    let baa = if region(&bg).is_empty() {
        tape.scalar(0.0)
    } else {
        attention_term(stack.background, &bg, weights, k)?.neg()
    };
    Ok((fas, baa))
}

/// `Σ_e |e| · ‖C(F₁) − C(F₂)‖₁` over shared edges of paintable faces.
/// `texture` is `[F, 3]`.
pub fn smooth_3d<'t>(texture: Var<'t>, mesh: &Mesh) -> Result<Var<'t>> {
    let tape = texture.tape();
    if mesh.edges.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let n = mesh.edges.len();
    let (mut left, mut right, mut lengths) = (
        Vec::with_capacity(3 * n),
        Vec::with_capacity(3 * n),
        Vec::with_capacity(3 * n),
    );
    for e in &mesh.edges {
        for c in 0..3 {
            left.push(3 * e.faces.0 + c);
            right.push(3 * e.faces.1 + c);
            lengths.push(e.length);
        }
    }
    let flat = texture.reshape(&[texture.value().len()])?;
    let diff = flat.gather(left)?.sub(flat.gather(right)?)?;
    Ok(diff.abs().mul_const(Tensor::from_vec(lengths))?.sum())
}

/// `Σ_faces min_c ‖p − c‖₁` against the printable palette.
pub fn nps<'t>(texture: Var<'t>, palette: &PrintablePalette) -> Result<Var<'t>> {
    let shape = texture.shape();
    let [faces, 3] = shape[..] else {
        return Err(Error::Invalid(format!(
            "texture must be [F, 3], got {shape:?}"
        )));
    };
    let mut best: Option<Var<'t>> = None;
    for c in palette.colors() {
        let target = Tensor::new(
            vec![faces, 3],
            c.iter().copied().cycle().take(3 * faces).collect(),
        )?;
        let dist = texture.add_const(&target.map(|v| -v))?.abs().sum_axis(1)?;
        best = Some(match best {
            Some(b) => b.minimum(dist)?,
            None => dist,
        });
    }
    Ok(best.expect("palette is non-empty").sum())
}

/// The individual objective terms, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub fas: Var<'t>,
    pub baa: Var<'t>,
    pub smooth: Var<'t>,
    pub nps: Var<'t>,
    pub total: Var<'t>,
}

/// Scalar values of every term, with optional per-term texture gradient
/// norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fas: f64,
    pub baa: f64,
    pub smooth: f64,
    pub nps: f64,
    pub total: f64,
    pub grad_norms: Option<TermGradNorms>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermGradNorms {
    pub fas: f64,
    pub baa: f64,
    pub smooth: f64,
    pub nps: f64,
    pub total: f64,
}

/// `L = L_FAS + L_BAA + β·L_S3D + γ·L_NPS`. Disabled attention items
/// contribute a constant zero.
pub fn total_loss<'t>(
    stack: &AttentionStack<'t>,
    texture: Var<'t>,
    mesh: &Mesh,
    palette: &PrintablePalette,
    weights: &LossWeights,
) -> Result<LossTerms<'t>> {
    weights.validate()?;
    let tape = texture.tape();
    let (fas, baa) = fas_baa(stack, weights)?;
    let fas = if weights.use_fas {
        fas
    } else {
        tape.scalar(0.0)
    };
    let baa = if weights.use_baa {
        baa
    } else {
        tape.scalar(0.0)
    };
    let smooth = smooth_3d(texture, mesh)?;
    let nps = nps(texture, palette)?;
    let total = fas
        .add(baa)?
        .add(smooth.scale(weights.beta))?
        .add(nps.scale(weights.gamma))?;
    Ok(LossTerms {
        fas,
        baa,
        smooth,
        nps,
        total,
    })
}

impl<'t> LossTerms<'t> {
    /// Scalar summary; with `texture`, also the L2 norm of each term's
    /// gradient with respect to it.
    pub fn breakdown(&self, texture: Option<Var<'t>>) -> Result<LossBreakdown> {
        let grad_norms = match texture {
            Some(t) => {
                let norm = |v: Var<'t>| -> Result<f64> {
                    let g = v.tape().grad(v, &[t], false)?.remove(0);
                    Ok(
                        g.map(|g| g.value().data().iter().map(|x| x * x).sum::<f64>().sqrt())
                            .unwrap_or(0.0),
                    )
                };
                Some(TermGradNorms {
                    fas: norm(self.fas)?,
                    baa: norm(self.baa)?,
                    smooth: norm(self.smooth)?,
                    nps: norm(self.nps)?,
                    total: norm(self.total)?,
                })
            }
            None => None,
        };
        Ok(LossBreakdown {
            fas: self.fas.item(),
            baa: self.baa.item(),
            smooth: self.smooth.item(),
            nps: self.nps.item(),
            total: self.total.item(),
            grad_norms,
        })
    }
}
