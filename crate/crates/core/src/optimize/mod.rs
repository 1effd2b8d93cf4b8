//! The texture attack loop: render, attend, score, step.

mod checkpoint;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use diffcore::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::attention::{averaged_attention, ResampleCache, TransformSpec};
use crate::detector::{encode_weights, DetectorModel};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights, PrintablePalette};
use crate::scene::{Mesh, PreparedScene, Texture, NEUTRAL_GRAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    RandomUniform,
    ConstantGray,
}

/// Everything that shapes the optimization trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// White-box detector weights (informational; the model is passed in).
    pub model_path: Option<PathBuf>,
    pub weights: LossWeights,
    /// Compound transforms per view set.
    pub transforms: usize,
    /// Base transforms per compound transform.
    pub base_transforms: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    pub init: InitMode,
    /// Write a checkpoint every this many iterations (0: per epoch only).
    pub checkpoint_every: usize,
    /// Min–max normalize each averaged layer map.
    pub normalize_attention: bool,
    /// Record per-term gradient norms in the log (extra backward passes).
    pub log_grad_norms: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            weights: LossWeights::default(),
            transforms: 3,
            base_transforms: 3,
            batch_size: 2,
            epochs: 5,
            learning_rate: 0.01,
            momentum: 0.0,
            seed: 0,
            init: InitMode::RandomUniform,
            checkpoint_every: 0,
            normalize_attention: true,
            log_grad_norms: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Digest of the trajectory-relevant settings, the model weights and
    /// the scene list. Epoch count and checkpoint cadence are excluded so
    /// that a run may be extended.
    pub fn trajectory_hash(&self, model: &DetectorModel, scenes: &[PreparedScene]) -> String {
        let mut relevant = self.clone();
        relevant.epochs = 0;
        relevant.checkpoint_every = 0;
        relevant.log_grad_norms = false;
        relevant.model_path = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&relevant).expect("config serializes"));
        h.update(encode_weights(model));
        for s in scenes {
            h.update(s.spec.id().as_bytes());
            h.update([0]);
        }
        format!("{:x}", h.finalize())
    }
}

/// Starting texture for the attack.
pub fn init_texture(mesh: &Mesh, mode: InitMode, seed: u64) -> Texture {
    let faces = mesh.num_sampled();
    match mode {
        InitMode::ConstantGray => Texture::uniform(faces, [NEUTRAL_GRAY; 3]),
        InitMode::RandomUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x07e8_70e5);
            Texture {
                colors: (0..faces)
                    .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                    .collect(),
            }
        }
    }
}

/// Knobs that do not change the trajectory.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many total iterations (for interruption tests).
    pub stop_after: Option<usize>,
    /// Evaluate batch scenes in parallel; results are reduced in order.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub scenes: Vec<String>,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub log: Vec<IterationLog>,
    pub checkpoints: Vec<PathBuf>,
    pub texture: Texture,
    /// Iterations completed, counting any before a resume.
    pub iterations: usize,
    pub config_hash: String,
}

/// Loss and texture gradient for one scene under the current texture.
pub fn scene_objective(
    model: &DetectorModel,
    scene: &PreparedScene,
    texture: &Texture,
    mesh: &Mesh,
    palette: &PrintablePalette,
    config: &AttackConfig,
    specs: &[TransformSpec],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let tape = Tape::new();
    let tex = tape.leaf(texture.to_tensor(), true);
    let rendered = scene.render(texture)?;
    let image = rendered.image_var(tex)?;
    let truth = scene.ground_truth();
    let mask = Arc::new(scene.fragments.mask_f64());
    let mut cache = ResampleCache::new();
    let stack = averaged_attention(
        model,
        image,
        mask,
        specs,
        truth.as_ref(),
        config.normalize_attention,
        &mut cache,
    )?;
    let terms = total_loss(&stack, tex, mesh, palette, &config.weights)?;
    let breakdown = terms.breakdown(config.log_grad_norms.then_some(tex))?;
    let grad = tape.grad(terms.total, &[tex], false)?.remove(0);
    let grad = grad
        .map(|g| g.value().data().to_vec())
        .unwrap_or_else(|| vec![0.0; 3 * texture.len()]);
    Ok((breakdown, grad))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn iteration_specs(config: &AttackConfig, iteration: usize, size: usize) -> Vec<TransformSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        config.seed ^ 0x5bec_0000 ^ (iteration as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9),
    );
    (0..config.transforms)
        .map(|_| TransformSpec::random(config.base_transforms, size, &mut rng))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn average_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len();
    LossBreakdown {
        fas: mean(parts.iter().map(|b| b.fas), n),
        baa: mean(parts.iter().map(|b| b.baa), n),
        smooth: mean(parts.iter().map(|b| b.smooth), n),
        nps: mean(parts.iter().map(|b| b.nps), n),
        total: mean(parts.iter().map(|b| b.total), n),
        grad_norms: None,
    }
}

/// Runs the attack from the configured initial texture.
pub fn attack(
    config: &AttackConfig,
    model: &DetectorModel,
    mesh: &Mesh,
    palette: &PrintablePalette,
    scenes: &[PreparedScene],
    options: &RunOptions,
) -> Result<AttackRun> {
    let start = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config.trajectory_hash(model, scenes),
        seed: config.seed,
        iteration: 0,
        texture: init_texture(mesh, config.init, config.seed),
        velocity: vec![0.0; 3 * mesh.num_sampled()],
    };
    run_from(config, model, mesh, palette, scenes, options, start)
}

/// Continues a run from `checkpoint`; the trajectory matches an
/// uninterrupted run with the same configuration.
pub fn resume(
    checkpoint: Checkpoint,
    config: &AttackConfig,
    model: &DetectorModel,
    mesh: &Mesh,
    palette: &PrintablePalette,
    scenes: &[PreparedScene],
    options: &RunOptions,
) -> Result<AttackRun> {
    let hash = config.trajectory_hash(model, scenes);
    if checkpoint.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {}, current {}",
            checkpoint.config_hash, hash
        )));
    }
    if checkpoint.texture.len() != mesh.num_sampled() {
        return Err(Error::Checkpoint(format!(
            "checkpoint texture has {} faces, mesh has {}",
            checkpoint.texture.len(),
            mesh.num_sampled()
        )));
    }
    run_from(config, model, mesh, palette, scenes, options, checkpoint)
}

fn run_from(
    config: &AttackConfig,
    model: &DetectorModel,
    mesh: &Mesh,
    palette: &PrintablePalette,
    scenes: &[PreparedScene],
    options: &RunOptions,
    start: Checkpoint,
) -> Result<AttackRun> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("attack dataset is empty".into()));
    }
    let size = scenes[0].spec.pose.image_size;
    let per_epoch = scenes.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let stop = options.stop_after.map_or(total, |s| s.min(total));
    let hash = start.config_hash.clone();
    let mut texture = start.texture;
    let mut velocity = start.velocity;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iteration = start.iteration;
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    while iteration < stop {
        let epoch = iteration / per_epoch;
        let order = epoch_order(config.seed, epoch, scenes.len());
        let slot = iteration % per_epoch;
        let batch: Vec<&PreparedScene> = order
            [slot * config.batch_size..((slot + 1) * config.batch_size).min(scenes.len())]
            .iter()
            .map(|&i| &scenes[i])
            .collect();
        let specs = iteration_specs(config, iteration, size);
        let timer = Instant::now();
        let eval =
            |s: &&PreparedScene| scene_objective(model, s, &texture, mesh, palette, config, &specs);
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = if options.parallel {
            batch.par_iter().map(eval).collect()
        } else {
            batch.iter().map(eval).collect()
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let parts: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
        let mut loss = average_breakdown(&parts);
        if config.log_grad_norms {
            loss.grad_norms = parts[0].grad_norms;
        }
        let ids: Vec<String> = batch.iter().map(|s| s.spec.id()).collect();
        if !loss.total.is_finite() || results.iter().any(|r| r.1.iter().any(|g| !g.is_finite())) {
            let detail = format!("batch {ids:?}, per-scene losses {parts:?}");
            if let Some(dir) = &options.checkpoint_dir {
                let dump = dir.join(format!("nonfinite_{iteration:06}.json"));
                let body = serde_json::json!({ "iteration": iteration, "scenes": ids, "losses": parts, "texture": texture });
                std::fs::write(
                    &dump,
                    serde_json::to_vec_pretty(&body).expect("dump serializes"),
                )
                .map_err(|e| Error::io(&dump, e))?;
            }
            return Err(Error::NonFinite { iteration, detail });
        }
        let n = results.len() as f64;
        for (j, v) in velocity.iter_mut().enumerate() {
            let g = results.iter().map(|r| r.1[j]).sum::<f64>() / n;
            *v = config.momentum * *v + g;
        }
        for (c, v) in texture.colors.iter_mut().flatten().zip(&velocity) {
            *c = (*c - config.learning_rate * v).clamp(0.0, 1.0);
        }
        iteration += 1;
        log.push(IterationLog {
            iteration,
            epoch,
            scenes: ids,
            loss,
            seconds: timer.elapsed().as_secs_f64(),
        });
        let epoch_end = iteration.is_multiple_of(per_epoch);
        let periodic =
            config.checkpoint_every > 0 && iteration.is_multiple_of(config.checkpoint_every);
        if let Some(dir) = &options.checkpoint_dir {
            if epoch_end || periodic || iteration == stop {
                let path = dir.join(format!("checkpoint_{iteration:06}.json"));
                save_checkpoint(
                    &Checkpoint {
                        version: CHECKPOINT_VERSION,
                        config_hash: hash.clone(),
                        seed: config.seed,
                        iteration,
                        texture: texture.clone(),
                        velocity: velocity.clone(),
                    },
                    &path,
                )?;
                checkpoints.push(path);
            }
        }
    }
    Ok(AttackRun {
        log,
        checkpoints,
        texture,
        iterations: iteration,
        config_hash: hash,
    })
}
