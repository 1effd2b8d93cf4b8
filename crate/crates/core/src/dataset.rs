//! Scene sets and textured training renders for the detectors.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::TrainSample;
use crate::error::{Error, Result};
use crate::scene::{PreparedScene, Texture, NEUTRAL_GRAY};

/// Kinds of paint job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaintStyle {
    Gray,
    /// One random colour for the whole body.
    Solid,
    /// Each face takes one of three random colours.
    Swatches,
    /// Independent random colour per face.
    Noise,
}

/// Paint jobs the detectors see in training. Per-face noise is left out:
/// it teaches the detectors to ignore texture altogether.
pub const TRAINING_STYLES: [PaintStyle; 3] =
    [PaintStyle::Gray, PaintStyle::Solid, PaintStyle::Swatches];

pub fn paint<R: Rng>(faces: usize, style: PaintStyle, rng: &mut R) -> Texture {
    let color = |rng: &mut R| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    match style {
        PaintStyle::Gray => Texture::uniform(faces, [NEUTRAL_GRAY; 3]),
        PaintStyle::Solid => Texture::uniform(faces, color(rng)),
        PaintStyle::Noise => Texture {
            colors: (0..faces).map(|_| color(rng)).collect(),
        },
        PaintStyle::Swatches => {
            let swatches: Vec<[f64; 3]> = (0..3).map(|_| color(rng)).collect();
            Texture {
                colors: (0..faces).map(|_| swatches[rng.gen_range(0..3)]).collect(),
            }
        }
    }
}

/// A random training paint job.
pub fn training_texture<R: Rng>(faces: usize, rng: &mut R) -> Texture {
    let style = TRAINING_STYLES[rng.gen_range(0..TRAINING_STYLES.len())];
    paint(faces, style, rng)
}

/// Renders every scene `variants` times with assorted paint jobs. Scenes
/// without a visible vehicle are skipped. With `repaint`, training draws a
/// new paint job for each sample every epoch.
pub fn detector_samples(
    scenes: &[PreparedScene],
    variants: usize,
    seed: u64,
    repaint: bool,
) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0da7_a5e7);
    let mut out = Vec::with_capacity(scenes.len() * variants);
    for (i, scene) in scenes.iter().enumerate() {
        let Some(truth) = scene.ground_truth() else {
            continue;
        };
        let faces = scene.fragments.num_sampled();
        for v in 0..variants {
            let style = TRAINING_STYLES[(i + v) % TRAINING_STYLES.len()];
            let texture = paint(faces, style, &mut rng);
            let image = scene.render(&texture)?.image.to_tensor();
            out.push(TrainSample {
                image: Arc::new(image),
                truth,
                scene: repaint.then(|| Arc::new(scene.clone())),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no scene shows the vehicle".into()));
    }
    Ok(out)
}
