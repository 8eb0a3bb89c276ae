//! Subcommand implementations behind the `blockgan` binary.
//!
//! Configuration precedence is flags, then the `--config` file, then built-in
//! defaults. Every run that writes an output directory also writes the
//! effective configuration there, in the same format as the input file.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use blockgan::checkpoint::{load_checkpoint, write_atomic};
use blockgan::dataset::{image_grid, make_dataset, native_size, save_png, ImageSet, ToyDatasetConfig, MANIFEST_FILE};
use blockgan::gradcheck::{composed_options, composed_suite, op_suite, worst_per_op, CheckOptions, REL_TOL};
use blockgan::kid::{kid, Extractor, ExtractorId, KidOptions, KidReport, PROJECTION_DIM};
use blockgan::model::{render_batch, render_spec, ModelConfig, SceneSpec};
use blockgan::training::{run as train_loop, sample_scene_batch, LoopOptions, TrainConfig, Trainer};
use blockgan::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const THREADS_ENV: &str = "BGAN_THREADS";
pub const EFFECTIVE_TRAIN_CONFIG: &str = "config.toml";
pub const EFFECTIVE_DATASET_CONFIG: &str = "dataset.toml";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<blockgan::Error> for CliError {
    fn from(e: blockgan::Error) -> Self {
        match e {
            blockgan::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// Seeds stay within the signed range so configs echo losslessly to TOML.
fn seed_arg(s: &str) -> std::result::Result<u64, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > i64::MAX as u64 {
        return Err(format!("seed must be at most {}", i64::MAX));
    }
    Ok(v)
}

#[derive(Parser, Debug)]
#[command(name = "blockgan", version, about = "Compositional 3D-aware scene generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a toy dataset of primitives on a ground plane.
    MakeDataset(MakeDatasetArgs),
    /// Train a generator and discriminator on an image directory.
    Train(TrainArgs),
    /// Render scenes from a checkpoint.
    Generate(GenerateArgs),
    /// Kernel distance between two image sets.
    Eval(EvalArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = seed_arg)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = seed_arg)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene list (`.json` or `.toml`); without it, scenes are sampled from
    /// the training distribution.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = seed_arg, default_value_t = 0)]
    pub seed: u64,
    /// Number of sampled scenes when no spec is given.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    /// Generated images; if absent, `--checkpoint` generates as many as there
    /// are real images.
    #[arg(long)]
    pub fake: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// discriminator (needs --checkpoint), random-projection or raw-pixels.
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub subsets: usize,
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long, value_parser = seed_arg, default_value_t = 0)]
    pub seed: u64,
    /// Image size when no checkpoint fixes it; defaults to the shorter side
    /// of the first real image.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Directory for `kid.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, value_parser = seed_arg, default_value_t = 0x5eed)]
    pub seed: u64,
    /// Architecture for the composed checks.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

/// `make-dataset` config file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetFile {
    pub seed: u64,
    pub dataset: ToyDatasetConfig,
}

fn default_preset() -> String {
    "desk".into()
}

fn default_every() -> u64 {
    500
}

fn default_sample_count() -> usize {
    16
}

/// `train` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Image directory.
    pub data: PathBuf,
    #[serde(default)]
    pub random_crop: bool,
    /// Architecture preset, used when `model` is absent.
    #[serde(default = "default_preset")]
    pub preset: String,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Total steps; defaults to the configured epochs.
    pub steps: Option<u64>,
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_every")]
    pub sample_every: u64,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
}

/// Scene list for `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub scenes: Vec<SceneSpec>,
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    toml::from_str(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = toml::to_string(value).map_err(runtime)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeDataset(a) => make_dataset_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn make_dataset_cmd(a: MakeDatasetArgs) -> CliResult<()> {
    let mut file: DatasetFile = match &a.config {
        Some(p) => parse_toml(p)?,
        None => DatasetFile::default(),
    };
    if let Some(s) = a.seed {
        file.seed = s;
    }
    file.dataset.validate()?;
    create_dir(&a.out)?;
    write_toml(&file, &a.out.join(EFFECTIVE_DATASET_CONFIG))?;
    let manifest = make_dataset(&file.dataset, file.seed, &a.out)?;
    log::info!("wrote {} images to {}", manifest.files.len(), a.out.display());
    Ok(())
}

/// Resolve the train config file and flags into the configuration actually used.
pub fn effective_train_config(file: TrainFile, seed: Option<u64>, steps: Option<u64>) -> CliResult<TrainFile> {
    let mut eff = file;
    let model = match eff.model.take() {
        Some(m) => m,
        None => ModelConfig::preset(&eff.preset)?,
    };
    model.validate()?;
    eff.model = Some(model);
    if let Some(s) = seed {
        eff.train.seed = s;
    }
    if steps.is_some() {
        eff.steps = steps;
    }
    eff.train.validate()?;
    Ok(eff)
}

fn dataset_meta(dir: &Path) -> serde_json::Value {
    let manifest = fs::read(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok());
    match manifest {
        Some(m) => serde_json::json!({
            "dir": dir.display().to_string(),
            "seed": m.get("seed"),
            "config": m.get("config"),
        }),
        None => serde_json::json!({ "dir": dir.display().to_string() }),
    }
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let file: TrainFile = parse_toml(&a.config)?;
    let mut eff = effective_train_config(file, a.seed, a.steps)?;
    let mut trainer = match &a.checkpoint {
        Some(p) => {
            let t = load_checkpoint(p)?.into_trainer()?;
            if a.seed.is_some_and(|s| s != t.train.seed) {
                return Err(usage("--seed cannot change the seed of a resumed run"));
            }
            log::info!("resuming {} at step {}", p.display(), t.step);
            eff.model = Some(t.model.clone());
            eff.train = t.train.clone();
            t
        }
        None => Trainer::new(eff.model.clone().expect("resolved"), eff.train.clone())?,
    };
    let model = eff.model.as_ref().expect("resolved");
    let images = ImageSet::load_dir(&eff.data, model.image_size, eff.random_crop)?;
    if images.len() < eff.train.batch_size {
        return Err(usage(format!(
            "{} has {} usable images, fewer than the batch size {}",
            eff.data.display(),
            images.len(),
            eff.train.batch_size
        )));
    }
    create_dir(&a.out)?;
    write_toml(&eff, &a.out.join(EFFECTIVE_TRAIN_CONFIG))?;
    let opts = LoopOptions {
        steps: eff.steps,
        checkpoint_every: eff.checkpoint_every,
        sample_every: eff.sample_every,
        sample_count: eff.sample_count,
        dataset: Some(dataset_meta(&eff.data)),
        ..LoopOptions::new(&a.out)
    };
    log::info!("training on {} images from {}", images.len(), eff.data.display());
    let metrics = train_loop(&mut trainer, &images, &opts, |m| {
        if m.step % 50 == 0 {
            log::info!(
                "step {} epoch {}: loss_d {:.4} loss_g {:.4} style {:.4}",
                m.step,
                m.epoch,
                m.loss_d,
                m.loss_g,
                m.loss_style
            );
        }
    })?;
    log::info!("finished {} steps, now at step {}", metrics.len(), trainer.step);
    Ok(())
}

fn read_spec(path: &Path) -> CliResult<SpecFile> {
    let text = read_text(path)?;
    let ext = path.extension().and_then(|x| x.to_str()).unwrap_or("");
    let parsed = if ext.eq_ignore_ascii_case("json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn generate_cmd(a: GenerateArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.meta.model;
    create_dir(&a.out)?;
    match &a.spec {
        Some(p) => {
            let spec = read_spec(p)?;
            if spec.scenes.is_empty() {
                return Err(usage(format!("{}: no scenes", p.display())));
            }
            for (i, scene) in spec.scenes.iter().enumerate() {
                scene.to_batch(model).map_err(|e| usage(format!("scenes[{i}]: {e}")))?;
            }
            for (i, scene) in spec.scenes.iter().enumerate() {
                let img = render_spec(&ckpt.gen, model, scene)?;
                save_png(&img, &a.out.join(format!("scene{i:03}.png")))?;
            }
            log::info!("wrote {} images to {}", spec.scenes.len(), a.out.display());
        }
        None => {
            let train = ckpt.meta.train.clone().unwrap_or_default();
            let images = sample_images(&ckpt.gen, model, &train, a.count, a.seed)?;
            let s = model.image_size;
            for i in 0..a.count {
                let one = Tensor::new(&[s, s, 3], images.data()[i * s * s * 3..(i + 1) * s * s * 3].to_vec())?;
                save_png(&one, &a.out.join(format!("sample{i:03}.png")))?;
            }
            save_png(&image_grid(&images)?, &a.out.join("grid.png"))?;
            log::info!("wrote {} samples to {}", a.count, a.out.display());
        }
    }
    Ok(())
}

/// `n` images from the training distribution, rendered in chunks.
fn sample_images(
    params: &blockgan::params::ParamStore,
    model: &ModelConfig,
    train: &TrainConfig,
    n: usize,
    seed: u64,
) -> CliResult<Tensor<f32>> {
    if n == 0 {
        return Err(usage("--count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut done = 0;
    while done < n {
        let len = 32.min(n - done);
        let batch = sample_scene_batch(&mut rng, model, train, len);
        data.extend_from_slice(render_batch(params, model, &batch)?.data());
        done += len;
    }
    let s = model.image_size;
    Ok(Tensor::new(&[n, s, s, 3], data)?)
}

/// KID between `--real` and either `--fake` or checkpoint samples.
pub fn evaluate(a: &EvalArgs) -> CliResult<KidReport> {
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let extractor: ExtractorId = match &a.extractor {
        Some(s) => s.parse().map_err(|e: blockgan::Error| usage(e.to_string()))?,
        None if ckpt.is_some() => ExtractorId::Discriminator,
        None => ExtractorId::RandomProjection,
    };
    if extractor == ExtractorId::Discriminator && ckpt.is_none() {
        return Err(usage("the discriminator extractor needs --checkpoint"));
    }
    if a.fake.is_none() && ckpt.is_none() {
        return Err(usage("give --fake or --checkpoint"));
    }
    let size = match (&ckpt, a.image_size) {
        (Some(c), Some(s)) if s != c.meta.model.image_size => {
            return Err(usage(format!(
                "--image-size {s} differs from the checkpoint's {}",
                c.meta.model.image_size
            )))
        }
        (Some(c), _) => c.meta.model.image_size,
        (None, Some(s)) => s,
        (None, None) => native_size(&a.real)?,
    };
    let real = ImageSet::load_dir(&a.real, size, false)?.all()?;
    let fake = match (&a.fake, &ckpt) {
        (Some(dir), _) => ImageSet::load_dir(dir, size, false)?.all()?,
        (None, Some(c)) => {
            let train = c.meta.train.clone().unwrap_or_default();
            sample_images(&c.gen, &c.meta.model, &train, real.shape()[0], a.seed)?
        }
        (None, None) => unreachable!("checked above"),
    };
    let ex = match extractor {
        ExtractorId::Discriminator => {
            let c = ckpt.as_ref().expect("checked above");
            Extractor::Discriminator {
                model: &c.meta.model,
                params: &c.disc,
            }
        }
        ExtractorId::RandomProjection => Extractor::RandomProjection {
            dim: PROJECTION_DIM,
            seed: a.seed,
        },
        ExtractorId::RawPixels => Extractor::RawPixels,
    };
    let opts = KidOptions {
        subsets: a.subsets,
        subset_size: a.subset_size,
        seed: a.seed,
    };
    let fr = ex.extract(&real)?;
    let ff = ex.extract(&fake)?;
    kid(&fr, &ff, &opts).map_err(|e| match e {
        blockgan::Error::InvalidArgument { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let report = evaluate(&a)?;
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    println!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_atomic(&dir.join("kid.json"), text.as_bytes())?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    if !a.checkpoint.is_file() {
        return Err(usage(format!("{}: no such checkpoint", a.checkpoint.display())));
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;
    rt.block_on(blockgan_service::serve(&a.checkpoint, a.bind)).map_err(runtime)
}

fn grad_check_cmd(a: GradCheckArgs) -> CliResult<()> {
    let model = ModelConfig::preset(&a.preset)?;
    let ops = op_suite(&CheckOptions {
        seed: a.seed,
        ..Default::default()
    })?;
    let composed = composed_suite(
        &model,
        &CheckOptions {
            seed: a.seed,
            ..composed_options()
        },
    )?;
    let mut all = worst_per_op(&ops);
    all.extend(worst_per_op(&composed));
    let mut failed = 0;
    println!("{:<22} {:>12} {:>8}  result", "op", "worst rel", "coords");
    for (name, worst, coords) in &all {
        let ok = *worst < REL_TOL;
        failed += usize::from(!ok);
        println!("{name:<22} {worst:>12.3e} {coords:>8}  {}", if ok { "pass" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} checks exceed {REL_TOL:e}", all.len())));
    }
    println!("all {} checks below {REL_TOL:e}", all.len());
    Ok(())
}

/// Cap rayon's pool from `BGAN_THREADS`.
pub fn configure_threads(value: Option<&str>) -> CliResult<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}
