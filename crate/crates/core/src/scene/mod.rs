//! Geometry ingestion, camera poses, rasterization and compositing.

mod background;
mod mesh;
mod raster;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use background::{make_background, BackgroundKind};
pub use mesh::{
    load_mesh, parse_obj, procedural_vehicle, procedural_vehicle_with_cell, Mesh, SharedEdge,
};
pub use raster::{
    compose, pose_grid, rasterize, rasterize_fragments, CameraPose, Fragments, RenderedScene,
    Texture, NEUTRAL_GRAY,
};

use crate::detector::GroundTruth;
use crate::error::Result;
use crate::image_io::Image;

/// A vehicle placement: background plus the look-at offset that moves the
/// vehicle off the image centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: usize,
    pub background: BackgroundKind,
    pub background_seed: u64,
    pub target: [f64; 3],
}

/// `count` locations alternating gradient and noise backgrounds.
pub fn make_locations(count: usize, seed: u64, max_offset: f64) -> Vec<Location> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ca_7105);
    (0..count)
        .map(|id| Location {
            id,
            background: if id % 2 == 0 {
                BackgroundKind::Noise
            } else {
                BackgroundKind::Gradient
            },
            background_seed: rng.gen(),
            target: [
                rng.gen_range(-max_offset..=max_offset),
                rng.gen_range(-max_offset..=max_offset),
                0.0,
            ],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub pose: CameraPose,
    pub location: Location,
}

impl SceneSpec {
    pub fn id(&self) -> String {
        format!(
            "loc{}_d{}_p{}_y{}",
            self.location.id, self.pose.distance, self.pose.pitch_deg, self.pose.yaw_deg
        )
    }
}

/// Location-major product of locations and poses; `fov` and `image_size`
/// override the poses'.
pub fn scene_specs(
    poses: &[CameraPose],
    locations: &[Location],
    fov_deg: f64,
    image_size: usize,
) -> Vec<SceneSpec> {
    locations
        .iter()
        .flat_map(|loc| {
            poses.iter().map(move |p| {
                let mut pose = *p;
                pose.target = loc.target;
                pose.fov_deg = fov_deg;
                pose.image_size = image_size;
                SceneSpec {
                    pose,
                    location: loc.clone(),
                }
            })
        })
        .collect()
}

/// Ranges for randomly drawn camera poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseRange {
    pub distance: (f64, f64),
    pub pitch_deg: (f64, f64),
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            distance: (3.5, 9.0),
            pitch_deg: (40.0, 90.0),
        }
    }
}

/// `count` scenes with uniformly drawn poses, each at its own location.
pub fn random_scene_specs(
    count: usize,
    seed: u64,
    range: PoseRange,
    max_offset: f64,
    fov_deg: f64,
    image_size: usize,
) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_905e);
    let locations = make_locations(count, seed, max_offset);
    locations
        .into_iter()
        .map(|location| {
            let mut pose = CameraPose::new(
                rng.gen_range(range.distance.0..=range.distance.1),
                rng.gen_range(range.pitch_deg.0..=range.pitch_deg.1),
                rng.gen_range(0.0..360.0),
            );
            pose.target = location.target;
            pose.fov_deg = fov_deg;
            pose.image_size = image_size;
            SceneSpec { pose, location }
        })
        .collect()
}

/// A scene whose geometry and background are fixed; only the texture varies.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub spec: SceneSpec,
    pub fragments: Arc<Fragments>,
    pub background: Arc<Image>,
}

impl PreparedScene {
    pub fn new(mesh: &Mesh, spec: SceneSpec) -> Result<Self> {
        let fragments = rasterize_fragments(mesh, &spec.pose)?;
        let background = make_background(
            &spec.location.background,
            spec.location.background_seed,
            spec.pose.image_size,
        )?;
        Ok(Self {
            spec,
            fragments: Arc::new(fragments),
            background: Arc::new(background),
        })
    }

    pub fn render(&self, texture: &Texture) -> Result<RenderedScene> {
        compose(
            self.fragments.clone(),
            texture,
            &self.background,
            self.spec.id(),
        )
    }

    pub fn ground_truth(&self) -> Option<GroundTruth> {
        self.fragments.mask_bbox().map(|b| GroundTruth { bbox: b })
    }
}

pub fn prepare_scenes(mesh: &Mesh, specs: &[SceneSpec]) -> Result<Vec<PreparedScene>> {
    specs
        .iter()
        .map(|s| PreparedScene::new(mesh, s.clone()))
        .collect()
}
