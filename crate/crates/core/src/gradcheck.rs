//! Finite-difference checks of the texture gradient of every loss term on
//! a small fixture.

use std::path::Path;
use std::sync::Arc;

use diffcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{averaged_attention, ResampleCache, TransformSpec};
use crate::detector::{Architecture, DetectorModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights, PrintablePalette};
use crate::scene::{
    load_mesh, make_locations, parse_obj, scene_specs, CameraPose, Mesh, PreparedScene, Texture,
};

const TWO_FACE_OBJ: &str = include_str!("../assets/two_face.obj");

/// Gradient components smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Term names in report order.
pub const TERMS: [&str; 5] = ["fas", "baa", "smooth", "nps", "total"];

/// The bundled two-triangle square.
pub fn two_face_mesh() -> Mesh {
    parse_obj(TWO_FACE_OBJ, Path::new("two_face.obj")).expect("bundled fixture parses")
}

/// A single top-down scene of a small mesh with a randomly initialized
/// detector and a random texture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub mesh: Mesh,
    pub scene: PreparedScene,
    pub model: DetectorModel,
    pub palette: PrintablePalette,
    pub texture: Texture,
}

impl Fixture {
    /// The two-face square seen from straight above at `size` pixels.
    pub fn two_face(size: usize, seed: u64) -> Result<Self> {
        Self::from_mesh(two_face_mesh(), size, seed)
    }

    /// Loads `path`, or the two-face square when `None`.
    pub fn load(path: Option<&Path>, size: usize, seed: u64) -> Result<Self> {
        match path {
            Some(p) => Self::from_mesh(load_mesh(p)?, size, seed),
            None => Self::two_face(size, seed),
        }
    }

    pub fn from_mesh(mesh: Mesh, size: usize, seed: u64) -> Result<Self> {
        let (_, radius) = mesh.bounding_sphere();
        let pose = CameraPose::new(3.0 * radius.max(0.5), 90.0, 0.0);
        let locations = make_locations(1, seed, 0.0);
        let spec = scene_specs(&[pose], &locations, 60.0, size).remove(0);
        let scene = PreparedScene::new(&mesh, spec)?;
        if scene.ground_truth().is_none() {
            return Err(Error::Invalid("fixture mesh is not visible".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006c_4ec4);
        // Keep colours away from the palette and from each other so the
        // L1 kinks stay out of finite-difference reach.
        let texture = Texture {
            colors: (0..mesh.num_sampled())
                .map(|_| {
                    [
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    ]
                })
                .collect(),
        };
        Ok(Self {
            model: DetectorModel::init(Architecture::ArchA, seed),
            palette: PrintablePalette::default_palette(),
            mesh,
            scene,
            texture,
        })
    }

    /// Values of all terms, and the gradient of `term` when asked.
    pub fn evaluate(
        &self,
        texture: &Texture,
        weights: &LossWeights,
        specs: &[TransformSpec],
        term: Option<&str>,
    ) -> Result<([f64; 5], Option<Vec<f64>>)> {
        let tape = Tape::new();
        let tex = tape.leaf(texture.to_tensor(), true);
        let rendered = self.scene.render(texture)?;
        let image = rendered.image_var(tex)?;
        let truth = self.scene.ground_truth();
        let mask = Arc::new(self.scene.fragments.mask_f64());
        let mut cache = ResampleCache::new();
        let stack = averaged_attention(
            &self.model,
            image,
            mask,
            specs,
            truth.as_ref(),
            true,
            &mut cache,
        )?;
        let terms = total_loss(&stack, tex, &self.mesh, &self.palette, weights)?;
        let vars = [terms.fas, terms.baa, terms.smooth, terms.nps, terms.total];
        let values = vars.map(|v| v.item());
        let grad = match term {
            Some(name) => {
                let idx = term_index(name)?;
                let g = tape.grad(vars[idx], &[tex], false)?.remove(0);
                Some(g.map_or_else(
                    || vec![0.0; 3 * texture.len()],
                    |g| g.value().data().to_vec(),
                ))
            }
            None => None,
        };
        Ok((values, grad))
    }
}

fn term_index(name: &str) -> Result<usize> {
    TERMS
        .iter()
        .position(|t| *t == name)
        .ok_or_else(|| Error::Invalid(format!("unknown loss term {name:?}")))
}

/// Analytic against central-difference gradient of one term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub value: f64,
    /// `max_j |a_j − n_j| / max(|a_j|, |n_j|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

/// Checks every term's texture gradient with central differences of
/// half-width `step`.
pub fn check_terms(
    fixture: &Fixture,
    weights: &LossWeights,
    specs: &[TransformSpec],
    step: f64,
) -> Result<Vec<TermCheck>> {
    let base = &fixture.texture;
    let n = 3 * base.len();
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for j in 0..n {
        let shifted = |delta: f64| {
            let mut t = base.clone();
            t.colors[j / 3][j % 3] += delta;
            fixture.evaluate(&t, weights, specs, None).map(|r| r.0)
        };
        plus.push(shifted(step)?);
        minus.push(shifted(-step)?);
    }
    TERMS
        .iter()
        .enumerate()
        .map(|(idx, name)| {
            let (values, grad) = fixture.evaluate(base, weights, specs, Some(name))?;
            let analytic = grad.expect("gradient requested");
            let (mut rel, mut abs) = (0.0f64, 0.0f64);
            for j in 0..n {
                let numeric = (plus[j][idx] - minus[j][idx]) / (2.0 * step);
                let err = (analytic[j] - numeric).abs();
                abs = abs.max(err);
                rel = rel.max(err / analytic[j].abs().max(numeric.abs()).max(REL_FLOOR));
            }
            Ok(TermCheck {
                term: name.to_string(),
                value: values[idx],
                max_rel_error: rel,
                max_abs_error: abs,
                grad_norm: analytic.iter().map(|g| g * g).sum::<f64>().sqrt(),
            })
        })
        .collect()
}
