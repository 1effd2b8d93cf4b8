//! The run configuration document and the desk dataset it describes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::detector_samples;
use crate::detector::{
    train_detector, Architecture, DetectorModel, ScoreMode, TrainOptions, TrainReport,
};
use crate::error::{Error, Result};
use crate::evaluate::Thresholds;
use crate::optimize::AttackConfig;
use crate::scene::{
    load_mesh, make_locations, pose_grid, prepare_scenes, procedural_vehicle, random_scene_specs,
    scene_specs, BackgroundKind, Mesh, PoseRange, PreparedScene, Texture,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// OBJ path, or `None` for the built-in vehicle.
    pub mesh: Option<PathBuf>,
    pub sampled_face_fraction: f64,
    pub distances: Vec<f64>,
    pub pitches: Vec<f64>,
    pub yaws: Vec<f64>,
    /// Vehicle placements; the last `test_locations` are held out.
    pub locations: usize,
    pub test_locations: usize,
    /// Largest offset of the vehicle from the look-at point, scene units.
    pub max_offset: f64,
    /// Background images used in turn instead of procedural ones.
    pub background_files: Vec<PathBuf>,
    pub fov_deg: f64,
    pub image_size: usize,
    /// Paint of the unattacked vehicle.
    pub clean_color: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            sampled_face_fraction: 0.6,
            distances: vec![4.0, 6.0, 8.0],
            pitches: vec![50.0, 70.0, 90.0],
            yaws: (0..8).map(|i| 45.0 * i as f64).collect(),
            locations: 4,
            test_locations: 1,
            max_offset: 1.0,
            background_files: Vec::new(),
            fov_deg: 60.0,
            image_size: 128,
            clean_color: [0.5; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub architecture: Architecture,
    pub seed: u64,
    pub score_mode: ScoreMode,
    /// Randomly posed scenes rendered for training.
    pub train_scenes: usize,
    pub pose_range: PoseRange,
    pub train: TrainOptions,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ArchA,
            seed: 1,
            score_mode: ScoreMode::OneStage,
            train_scenes: 600,
            pose_range: PoseRange::default(),
            train: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Target models as `name=path` weight files.
    pub models: Vec<String>,
    pub thresholds: Thresholds,
}

impl EvaluationConfig {
    /// Splits `name=path` entries; a bare path is named by its file stem.
    pub fn model_paths(&self) -> Result<Vec<(String, PathBuf)>> {
        self.models
            .iter()
            .map(|m| match m.split_once('=') {
                Some((name, path)) if !name.is_empty() => {
                    Ok((name.to_string(), PathBuf::from(path)))
                }
                Some(_) => Err(Error::Config(format!(
                    "model entry {m:?} has an empty name"
                ))),
                None => {
                    let path = PathBuf::from(m);
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .ok_or_else(|| {
                            Error::Config(format!("model entry {m:?} has no file name"))
                        })?;
                    Ok((name, path))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed for scene layout; required.
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            attack: AttackConfig {
                seed,
                ..AttackConfig::default()
            },
            evaluation: EvaluationConfig::default(),
            output_dir: default_output(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let s = &self.scene;
        if !(s.sampled_face_fraction > 0.0 && s.sampled_face_fraction <= 1.0) {
            return Err(Error::Config(
                "sampled_face_fraction must be in (0, 1]".into(),
            ));
        }
        if s.distances.is_empty() || s.pitches.is_empty() || s.yaws.is_empty() {
            return Err(Error::Config("pose grid lists must be non-empty".into()));
        }
        if s.locations == 0 || s.test_locations >= s.locations {
            return Err(Error::Config(
                "need at least one training location besides the held-out ones".into(),
            ));
        }
        if s.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        self.attack.validate()
    }

    /// Loads or builds the mesh and marks its paintable faces.
    pub fn mesh(&self) -> Result<Mesh> {
        let mut mesh = match &self.scene.mesh {
            Some(path) => load_mesh(path)?,
            None => procedural_vehicle(),
        };
        mesh.sample_upper_fraction(self.scene.sampled_face_fraction)?;
        Ok(mesh)
    }

    pub fn clean_texture(&self, mesh: &Mesh) -> Texture {
        Texture::uniform(mesh.num_sampled(), self.scene.clean_color)
    }

    /// The pose-grid scenes, split into attack (training) and held-out
    /// locations.
    pub fn desk_dataset(&self, mesh: &Mesh) -> Result<DeskDataset> {
        let s = &self.scene;
        let poses = pose_grid(&s.distances, &s.pitches, &s.yaws)?;
        let mut locations = make_locations(s.locations, self.seed, s.max_offset);
        if !s.background_files.is_empty() {
            for (i, loc) in locations.iter_mut().enumerate() {
                loc.background =
                    BackgroundKind::File(s.background_files[i % s.background_files.len()].clone());
            }
        }
        let specs = scene_specs(&poses, &locations, s.fov_deg, s.image_size);
        let mut scenes = prepare_scenes(mesh, &specs)?;
        let split = poses.len() * (s.locations - s.test_locations);
        let test = scenes.split_off(split);
        Ok(DeskDataset {
            train: scenes,
            test,
        })
    }

    /// Randomly posed scenes for detector training, disjoint in layout
    /// from the pose grid.
    pub fn detector_scenes(&self, mesh: &Mesh) -> Result<Vec<PreparedScene>> {
        let s = &self.scene;
        let specs = random_scene_specs(
            self.detector.train_scenes,
            self.seed ^ 0xde7e_c70e,
            self.detector.pose_range,
            s.max_offset,
            s.fov_deg,
            s.image_size,
        );
        prepare_scenes(mesh, &specs)
    }

    /// Renders the detector scenes and trains the configured detector.
    pub fn train_detector(&self, mesh: &Mesh) -> Result<(DetectorModel, TrainReport)> {
        let d = &self.detector;
        let scenes = self.detector_scenes(mesh)?;
        let samples = detector_samples(&scenes, 1, d.seed, true)?;
        let (model, report) = train_detector(d.architecture, &samples, d.seed, &d.train)?;
        Ok((model.with_score_mode(d.score_mode), report))
    }
}

/// Grid scenes for the attack and its held-out evaluation.
#[derive(Debug, Clone)]
pub struct DeskDataset {
    pub train: Vec<PreparedScene>,
    pub test: Vec<PreparedScene>,
}

impl DeskDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
