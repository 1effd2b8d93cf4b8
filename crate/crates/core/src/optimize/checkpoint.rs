use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Texture;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Attack state: enough to continue the exact trajectory. Random draws
/// are derived from `seed` and `iteration`, so no generator state is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub texture: Texture,
    pub velocity: Vec<f64>,
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let body = serde_json::to_vec(checkpoint).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cp: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            cp.version
        )));
    }
    Ok(cp)
}
