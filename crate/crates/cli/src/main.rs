//! `camo`: dataset rendering, detector training, texture attacks,
//! evaluation, sweeps, gradient checks and heatmap export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use camo::attention::{averaged_attention, ResampleCache, TransformSpec};
use camo::config::RunConfig;
use camo::detector::{load_weights, save_weights, DetectorModel};
use camo::evaluate::{sweep, transfer_matrix, SweepAxis, SweepContext, SweepValue};
use camo::gradcheck::{check_terms, Fixture};
use camo::losses::PrintablePalette;
use camo::optimize::{attack, load_checkpoint, resume, RunOptions};
use camo::scene::{Mesh, Texture};
use clap::{Parser, Subcommand};
use diffcore::Tape;
use rand::SeedableRng;
use serde_json::json;

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(
    name = "camo",
    version,
    about = "Adversarial camouflage textures for object detectors"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-scene parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the master, detector and attack seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the pose-grid dataset with the clean texture.
    RenderDataset,
    /// Train the configured detector and save its weights.
    TrainDetector {
        /// Weights file name inside the output directory.
        #[arg(long, default_value = "detector.bin")]
        name: String,
    },
    /// Optimize a camouflage texture against the white-box detector.
    Attack {
        /// White-box weights; defaults to the config's `attack.model_path`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score textures against target detectors on the held-out scenes.
    Evaluate {
        /// `name=path` texture JSON files.
        #[arg(long = "texture")]
        textures: Vec<String>,
        /// Extra `name=path` target weights besides the config's list.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// One attack and evaluation per value of a hyperparameter.
    Sweep {
        /// One of p, alpha1, alpha2, k, loss_items.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis' standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// White-box weights; defaults to the config's `attack.model_path`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference texture gradients.
    Gradcheck {
        /// OBJ mesh; defaults to the bundled two-face square.
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Number of compound transforms.
        #[arg(long, default_value_t = 0)]
        transforms: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Write attention heatmaps for held-out scenes.
    ExportHeatmaps {
        /// Texture JSON; defaults to the clean paint.
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Detector weights; defaults to the config's `attack.model_path`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Number of compound transforms averaged into each map.
        #[arg(long, default_value_t = 0)]
        transforms: usize,
    },
}

#[derive(Debug)]
enum Failure {
    /// Bad configuration or arguments.
    Config(String),
    /// Anything that went wrong while running.
    Runtime(String),
}

impl From<camo::Error> for Failure {
    fn from(e: camo::Error) -> Self {
        match e {
            camo::Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json serializes") + "\n"
}

struct Session {
    cfg: RunConfig,
    out: PathBuf,
    options: RunOptions,
}

impl Session {
    fn new(cli: &Cli) -> Outcome<Self> {
        let mut cfg = match (&cli.config, cli.seed) {
            (Some(path), _) => RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
            (None, Some(seed)) => RunConfig::with_seed(seed),
            (None, None) => {
                return Err(Failure::Config(
                    "a --config file (or at least --seed) is required".into(),
                ))
            }
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
            cfg.detector.seed = seed;
            cfg.attack.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        write_file(&out.join("config.json"), cfg.to_json() + "\n")?;
        let options = RunOptions {
            parallel: !cli.deterministic && cli.threads != Some(1),
            ..RunOptions::default()
        };
        Ok(Self { cfg, out, options })
    }

    fn summary(&self, command: &str, value: serde_json::Value) -> Outcome<()> {
        let path = self.out.join(format!("{command}_summary.json"));
        write_file(&path, pretty(&value))?;
        println!("{}", path.display());
        Ok(())
    }

    fn load_model(&self, path: &Path) -> Outcome<DetectorModel> {
        Ok(load_weights(path)?.with_score_mode(self.cfg.detector.score_mode))
    }

    fn white_box(&self, flag: &Option<PathBuf>) -> Outcome<(PathBuf, DetectorModel)> {
        let path = flag
            .clone()
            .or_else(|| self.cfg.attack.model_path.clone())
            .ok_or_else(|| {
                Failure::Config("no white-box model: pass --model or set attack.model_path".into())
            })?;
        let model = self.load_model(&path)?;
        Ok((path, model))
    }

    /// Config targets plus `extra`, or the white box alone when both are empty.
    fn targets(
        &self,
        extra: &[String],
        fallback: Option<&DetectorModel>,
    ) -> Outcome<Vec<(String, DetectorModel)>> {
        let mut eval = self.cfg.evaluation.clone();
        eval.models.extend(extra.iter().cloned());
        let mut models = Vec::new();
        for (name, path) in eval.model_paths()? {
            models.push((name, self.load_model(&path)?));
        }
        if models.is_empty() {
            match fallback {
                Some(m) => models.push(("white_box".into(), m.clone())),
                None => {
                    return Err(Failure::Config(
                        "no target models: set evaluation.models or pass --model".into(),
                    ))
                }
            }
        }
        Ok(models)
    }
}

fn load_texture(path: &Path, mesh: &Mesh) -> Outcome<Texture> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let texture: Texture = serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if texture.len() != mesh.num_sampled() {
        return Err(Failure::Config(format!(
            "{}: texture has {} faces, mesh has {} paintable faces",
            path.display(),
            texture.len(),
            mesh.num_sampled()
        )));
    }
    Ok(texture)
}

fn named(entry: &str) -> Outcome<(String, PathBuf)> {
    match entry.split_once('=') {
        Some((name, path)) if !name.is_empty() => Ok((name.into(), PathBuf::from(path))),
        _ => {
            let path = PathBuf::from(entry);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Failure::Config(format!("texture entry {entry:?} has no name")))?;
            Ok((name, path))
        }
    }
}

fn render_dataset(s: &Session) -> Outcome<()> {
    let mesh = s.cfg.mesh()?;
    let data = s.cfg.desk_dataset(&mesh)?;
    let clean = s.cfg.clean_texture(&mesh);
    let mut labels = Vec::new();
    for (split, scenes) in [("train", &data.train), ("test", &data.test)] {
        let dir = s.out.join("dataset").join(split);
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for scene in scenes {
            let id = scene.spec.id();
            scene
                .render(&clean)?
                .image
                .save_png(dir.join(format!("{id}.png")))?;
            let bbox = scene.ground_truth().map(|t| t.bbox.corners());
            labels.push(json!({ "id": id, "split": split, "bbox": bbox }));
        }
    }
    write_file(
        &s.out.join("dataset").join("labels.json"),
        pretty(&json!(labels)),
    )?;
    let sc = &s.cfg.scene;
    s.summary(
        "render-dataset",
        json!({
            "images": data.len(),
            "train": data.train.len(),
            "test": data.test.len(),
            "poses": sc.distances.len() * sc.pitches.len() * sc.yaws.len(),
            "locations": sc.locations,
            "image_size": sc.image_size,
            "paintable_faces": mesh.num_sampled(),
        }),
    )
}

fn train(s: &Session, name: &str) -> Outcome<()> {
    let mesh = s.cfg.mesh()?;
    let (model, report) = s.cfg.train_detector(&mesh)?;
    let path = s.out.join(name);
    save_weights(&model, &path)?;
    s.summary(
        "train-detector",
        json!({
            "weights": name,
            "architecture": s.cfg.detector.architecture,
            "seed": s.cfg.detector.seed,
            "report": report,
        }),
    )
}

fn run_attack(
    s: &Session,
    model_flag: &Option<PathBuf>,
    resume_from: &Option<PathBuf>,
) -> Outcome<()> {
    let (model_path, model) = s.white_box(model_flag)?;
    let mesh = s.cfg.mesh()?;
    let data = s.cfg.desk_dataset(&mesh)?;
    let palette = PrintablePalette::default_palette();
    let mut config = s.cfg.attack.clone();
    config.model_path = Some(model_path);
    let options = RunOptions {
        checkpoint_dir: Some(s.out.join("checkpoints")),
        ..s.options.clone()
    };
    let run = match resume_from {
        Some(path) => resume(
            load_checkpoint(path)?,
            &config,
            &model,
            &mesh,
            &palette,
            &data.train,
            &options,
        )?,
        None => attack(&config, &model, &mesh, &palette, &data.train, &options)?,
    };
    write_file(
        &s.out.join("texture.json"),
        serde_json::to_string(&run.texture).expect("texture serializes") + "\n",
    )?;
    let mut log = String::from("iteration,epoch,total,fas,baa,smooth,nps\n");
    for l in &run.log {
        let b = &l.loss;
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            l.iteration, l.epoch, b.total, b.fas, b.baa, b.smooth, b.nps
        );
    }
    write_file(&s.out.join("attack_log.csv"), log)?;
    // A white box that misses every clean render leaves the success rate
    // undefined; the texture is still written.
    let evaluation = match transfer_matrix(
        &[("adversarial".into(), run.texture.clone())],
        &[("white_box".into(), model)],
        &data.test,
        &s.cfg.clean_texture(&mesh),
        &s.cfg.evaluation.thresholds,
        options.parallel,
    ) {
        Ok(report) => {
            let adv = report.row("adversarial", "white_box").expect("row exists");
            json!({ "clean_ap": adv.clean_ap, "ap": adv.ap, "asr": adv.asr })
        }
        Err(camo::Error::UndefinedAsr) => json!(null),
        Err(e) => return Err(e.into()),
    };
    s.summary(
        "attack",
        json!({
            "iterations": run.iterations,
            "config_hash": run.config_hash,
            "train_scenes": data.train.len(),
            "test_scenes": data.test.len(),
            "final_loss": run.log.last().map(|l| l.loss),
            "white_box": evaluation,
            "checkpoints": run.checkpoints.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy()).collect::<Vec<_>>(),
        }),
    )
}

fn evaluate(s: &Session, textures: &[String], models: &[String]) -> Outcome<()> {
    let mesh = s.cfg.mesh()?;
    let data = s.cfg.desk_dataset(&mesh)?;
    let mut painted = Vec::new();
    for entry in textures {
        let (name, path) = named(entry)?;
        painted.push((name, load_texture(&path, &mesh)?));
    }
    let fallback = match &s.cfg.attack.model_path {
        Some(path) => Some(s.load_model(path)?),
        None => None,
    };
    let targets = s.targets(models, fallback.as_ref())?;
    let report = transfer_matrix(
        &painted,
        &targets,
        &data.test,
        &s.cfg.clean_texture(&mesh),
        &s.cfg.evaluation.thresholds,
        s.options.parallel,
    )?;
    write_file(&s.out.join("report.csv"), report.to_csv())?;
    write_file(&s.out.join("report.json"), report.to_json() + "\n")?;
    s.summary(
        "evaluate",
        serde_json::from_str(&report.to_json()).expect("report is json"),
    )
}

fn run_sweep(
    s: &Session,
    axis: &str,
    values: &[String],
    model_flag: &Option<PathBuf>,
) -> Outcome<()> {
    let axis: SweepAxis = axis
        .parse()
        .map_err(|e: camo::Error| Failure::Config(e.to_string()))?;
    let values = if values.is_empty() {
        axis.default_values()
    } else {
        values
            .iter()
            .map(|v| SweepValue::parse(axis, v))
            .collect::<camo::Result<Vec<_>>>()
            .map_err(|e| Failure::Config(e.to_string()))?
    };
    let (_, white_box) = s.white_box(model_flag)?;
    let mesh = s.cfg.mesh()?;
    let data = s.cfg.desk_dataset(&mesh)?;
    let palette = PrintablePalette::default_palette();
    let models = s.targets(&[], Some(&white_box))?;
    let clean = s.cfg.clean_texture(&mesh);
    let ctx = SweepContext {
        mesh: &mesh,
        palette: &palette,
        white_box: &white_box,
        train: &data.train,
        test: &data.test,
        models: &models,
        clean_texture: &clean,
        thresholds: s.cfg.evaluation.thresholds,
        options: s.options.clone(),
    };
    let report = sweep(&ctx, &s.cfg.attack, axis, &values)?;
    let name = axis.name();
    write_file(&s.out.join(format!("sweep_{name}.csv")), report.to_csv())?;
    write_file(
        &s.out.join(format!("sweep_{name}.json")),
        report.to_json() + "\n",
    )?;
    let runs: Vec<_> = report
        .runs
        .iter()
        .map(|r| json!({ "value": r.label, "effective_k": r.effective_k, "final_loss": r.final_loss }))
        .collect();
    s.summary(
        "sweep",
        json!({ "axis": name, "csv": format!("sweep_{name}.csv"), "runs": runs }),
    )
}

fn gradcheck(
    cli: &Cli,
    mesh: &Option<PathBuf>,
    size: usize,
    transforms: usize,
    step: f64,
) -> Outcome<bool> {
    let seed = cli.seed.unwrap_or(0);
    let fixture = Fixture::load(mesh.as_deref(), size, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<TransformSpec> = (0..transforms)
        .map(|_| TransformSpec::random(3, size, &mut rng))
        .collect();
    let weights = match &cli.config {
        Some(path) => {
            RunConfig::load(path)
                .map_err(|e| Failure::Config(e.to_string()))?
                .attack
                .weights
        }
        None => Default::default(),
    };
    let checks = check_terms(&fixture, &weights, &specs, step)?;
    for c in &checks {
        println!(
            "{:<6} value {:>12.6e}  max relative error {:.3e}  max absolute error {:.3e}",
            c.term, c.value, c.max_rel_error, c.max_abs_error
        );
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = worst < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {worst:.3e} ({})",
        if passed { "ok" } else { "too large" }
    );
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let summary = json!({
            "faces": fixture.mesh.faces.len(),
            "size": size,
            "transforms": transforms,
            "step": step,
            "tolerance": GRADCHECK_TOLERANCE,
            "max_relative_error": worst,
            "passed": passed,
            "terms": checks,
        });
        write_file(&out.join("gradcheck_summary.json"), pretty(&summary))?;
    }
    Ok(passed)
}

fn export_heatmaps(
    s: &Session,
    texture: &Option<PathBuf>,
    model_flag: &Option<PathBuf>,
    count: usize,
    transforms: usize,
) -> Outcome<()> {
    let (_, model) = s.white_box(model_flag)?;
    let mesh = s.cfg.mesh()?;
    let data = s.cfg.desk_dataset(&mesh)?;
    let texture = match texture {
        Some(path) => load_texture(path, &mesh)?,
        None => s.cfg.clean_texture(&mesh),
    };
    let size = s.cfg.scene.image_size;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s.cfg.seed);
    let specs: Vec<TransformSpec> = (0..transforms)
        .map(|_| TransformSpec::random(s.cfg.attack.base_transforms, size, &mut rng))
        .collect();
    let dir = s.out.join("heatmaps");
    let mut files = Vec::new();
    let mut cache = ResampleCache::new();
    for scene in data.test.iter().take(count) {
        let id = scene.spec.id();
        let rendered = scene.render(&texture)?;
        let render_path = dir.join(format!("{id}_render.png"));
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        rendered.image.save_png(&render_path)?;
        files.push(render_path);
        let tape = Tape::new();
        let image = rendered.image_const(&tape);
        let mask = Arc::new(scene.fragments.mask_f64());
        let truth = scene.ground_truth();
        let stack = averaged_attention(
            &model,
            image,
            mask,
            &specs,
            truth.as_ref(),
            s.cfg.attack.normalize_attention,
            &mut cache,
        )?;
        files.extend(stack.export_heatmaps(&dir, &id, Some(&rendered.image))?);
    }
    let names: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    s.summary(
        "export-heatmaps",
        json!({ "scenes": count.min(data.test.len()), "transforms": transforms, "files": names }),
    )
}

fn run(cli: &Cli) -> Outcome<bool> {
    if cli.deterministic || cli.threads.is_some() {
        let threads = if cli.deterministic {
            1
        } else {
            cli.threads.unwrap_or(1).max(1)
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if let Command::Gradcheck {
        mesh,
        size,
        transforms,
        step,
    } = &cli.command
    {
        return gradcheck(cli, mesh, *size, *transforms, *step);
    }
    let session = Session::new(cli)?;
    match &cli.command {
        Command::RenderDataset => render_dataset(&session)?,
        Command::TrainDetector { name } => train(&session, name)?,
        Command::Attack { model, resume } => run_attack(&session, model, resume)?,
        Command::Evaluate { textures, models } => evaluate(&session, textures, models)?,
        Command::Sweep {
            axis,
            values,
            model,
        } => run_sweep(&session, axis, values, model)?,
        Command::ExportHeatmaps {
            texture,
            model,
            count,
            transforms,
        } => export_heatmaps(&session, texture, model, *count, *transforms)?,
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("camo: configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("camo: error: {msg}");
            ExitCode::from(1)
        }
    }
}
