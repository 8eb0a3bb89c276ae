//! Adversarial training: losses, the per-step schedule and the outer loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, write_atomic, Checkpoint};
use crate::dataset::{epoch_order, image_grid, save_png, ImageSet};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::{softplus, Activation, Graph, Var};
use crate::model::{
    discriminate, generate, init_discriminator, init_generator, render_batch, style_logits, ModelConfig, ObjectSlot, SceneBatch,
    BACKGROUND,
};
use crate::params::{adam_step, collect_grads, AdamConfig, AdamState, ParamStore};
use crate::pose::{sample_camera, sample_latents, sample_pose, PoseRanges};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Weight of the generator-side style losses.
    pub lambda_s: f64,
    /// Generator updates per discriminator update.
    pub g_steps: usize,
    pub pose: PoseRanges,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
}

fn default_epochs() -> u64 {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            lambda_s: 0.0,
            g_steps: 2,
            pose: PoseRanges::toy(),
            seed: 0,
            epochs: default_epochs(),
        }
    }
}

impl TrainConfig {
    pub fn synthetic(pose: PoseRanges) -> Self {
        TrainConfig {
            batch_size: 64,
            pose,
            ..Default::default()
        }
    }

    pub fn natural() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 5e-5,
                ..Default::default()
            },
            batch_size: 64,
            lambda_s: 1.0,
            pose: PoseRanges::real_car(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::Config(format!("lambda_s must be >= 0, got {}", self.lambda_s)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.g_steps == 0 {
            return Err(Error::Config("g_steps must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid adam settings {a:?}")));
        }
        self.pose.validate()
    }
}

/// Non-saturating losses on plain logits: `(L_D, L_G)`.
pub fn gan_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let ld = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    let lg = mean(fake, &|x| softplus(-x));
    (ld, lg)
}

fn mean_softplus<T: Real>(g: &mut Graph<T>, x: Var, negate: bool) -> Var {
    let x = if negate { g.scale(x, -T::one()) } else { x };
    let s = g.activation(x, Activation::Softplus);
    g.mean(s)
}

/// `mean softplus(-real) + mean softplus(fake)` in the graph.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let a = mean_softplus(g, real, true);
    let b = mean_softplus(g, fake, false);
    g.add(a, b)
}

/// `mean softplus(-fake)`, the non-saturating generator loss.
pub fn generator_loss<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    mean_softplus(g, fake, true)
}

/// `L_GAN + lambda_s * sum_l softplus(-style_l)`; returns `L_GAN` itself when
/// `lambda_s` is zero.
pub fn total_generator_loss<T: Real>(g: &mut Graph<T>, l_gan: Var, style: &[Var], lambda_s: f64) -> Result<Var> {
    if lambda_s == 0.0 || style.is_empty() {
        return Ok(l_gan);
    }
    let mut acc: Option<Var> = None;
    for &s in style {
        let l = mean_softplus(g, s, true);
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let styled = g.scale(acc.expect("non-empty"), T::from_f64(lambda_s));
    g.add(l_gan, styled)
}

/// Latents and poses for `n` training scenes.
pub fn sample_scene_batch(rng: &mut ChaCha8Rng, model: &ModelConfig, train: &TrainConfig, n: usize) -> SceneBatch {
    let bg = ObjectSlot {
        category: BACKGROUND.into(),
        z: sample_latents(rng, n, model.background.z_dim),
        poses: vec![Pose::IDENTITY; n],
        edits: vec![],
    };
    let cat = &model.foreground[0];
    let foreground = (0..model.num_foreground)
        .map(|_| ObjectSlot {
            category: cat.name.clone(),
            z: sample_latents(rng, n, cat.z_dim),
            poses: (0..n).map(|_| sample_pose(rng, &train.pose)).collect(),
            edits: vec![],
        })
        .collect();
    let cameras = (0..n)
        .map(|_| sample_camera(rng, &train.pose, model.camera_distance))
        .collect();
    SceneBatch {
        background: bg,
        foreground,
        cameras,
        intrinsics: model.camera,
        composer: model.composer,
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_d: f64,
    /// Mean adversarial generator loss over the generator updates of the step.
    pub loss_g: f64,
    /// Sum over layers of the generator-side style losses (mean over updates).
    pub loss_style: f64,
    pub loss_style_d: f64,
    pub d_updates: u64,
    pub g_updates: u64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    /// Completed steps.
    pub step: u64,
    pub d_updates: u64,
    pub g_updates: u64,
}

const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const CROP_SALT: u64 = 0x4352_4f50_5341_4c54;

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(INIT_STREAM);
        let gen = init_generator(&model, &mut rng)?;
        let disc = init_discriminator(&model, &mut rng)?;
        Ok(Trainer {
            gen_opt: AdamState::new(&gen),
            disc_opt: AdamState::new(&disc),
            model,
            train,
            gen,
            disc,
            step: 0,
            d_updates: 0,
            g_updates: 0,
        })
    }

    /// RNG for step `step`: independent of everything that happened before it.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(step);
        rng
    }

    /// Dataset indices of the minibatch used at `step`.
    pub fn batch_indices(&self, step: u64, dataset_len: usize) -> Result<Vec<usize>> {
        let b = self.train.batch_size;
        if dataset_len < b {
            return Err(Error::Config(format!(
                "dataset has {dataset_len} images, fewer than batch_size {b}"
            )));
        }
        let per_epoch = (dataset_len / b) as u64;
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize;
        let order = epoch_order(dataset_len, self.train.seed ^ SHUFFLE_SALT, epoch);
        Ok(order[pos * b..(pos + 1) * b].to_vec())
    }

    pub fn epoch_of(&self, step: u64, dataset_len: usize) -> u64 {
        step / (dataset_len / self.train.batch_size).max(1) as u64
    }

    fn d_update(&mut self, real: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let n = real.shape()[0];
        let batch = sample_scene_batch(rng, &self.model, &self.train, n);
        let mut g = Graph::<f32>::new();
        let gb = self.gen.bind(&mut g, false);
        let db = self.disc.bind(&mut g, true);
        let fake = generate(&mut g, &gb, &self.model, &batch)?.image;
        let real = g.constant(real.clone());
        let dr = discriminate(&mut g, &db, &self.model, real)?;
        let df = discriminate(&mut g, &db, &self.model, fake)?;
        let mut loss = discriminator_loss(&mut g, dr.logit, df.logit)?;
        let mut style_d = 0.0;
        if self.train.lambda_s > 0.0 {
            let sr = style_logits(&mut g, &db, &dr.features)?;
            let sf = style_logits(&mut g, &db, &df.features)?;
            for (&r, &f) in sr.iter().zip(&sf) {
                let l = discriminator_loss(&mut g, r, f)?;
                style_d += g.value(l).data()[0] as f64;
                loss = g.add(loss, l)?;
            }
        }
        let total = g.value(loss).data()[0] as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("discriminator loss {total}"),
            });
        }
        let grads = g.backward(loss)?;
        let named = collect_grads(&self.disc, &db, &grads)?;
        adam_step(&mut self.disc, &named, &mut self.disc_opt, &self.train.adam)?;
        self.d_updates += 1;
        Ok((total - style_d, style_d))
    }

    fn g_update(&mut self, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let batch = sample_scene_batch(rng, &self.model, &self.train, self.train.batch_size);
        let mut g = Graph::<f32>::new();
        let gb = self.gen.bind(&mut g, true);
        let db = self.disc.bind(&mut g, false);
        let fake = generate(&mut g, &gb, &self.model, &batch)?.image;
        let df = discriminate(&mut g, &db, &self.model, fake)?;
        let l_gan = generator_loss(&mut g, df.logit);
        let style = if self.train.lambda_s > 0.0 {
            style_logits(&mut g, &db, &df.features)?
        } else {
            Vec::new()
        };
        let loss = total_generator_loss(&mut g, l_gan, &style, self.train.lambda_s)?;
        let lg = g.value(l_gan).data()[0] as f64;
        let total = g.value(loss).data()[0] as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("generator loss {total}"),
            });
        }
        let style_sum = if self.train.lambda_s > 0.0 {
            (total - lg) / self.train.lambda_s
        } else {
            0.0
        };
        let grads = g.backward(loss)?;
        let named = collect_grads(&self.gen, &gb, &grads)?;
        adam_step(&mut self.gen, &named, &mut self.gen_opt, &self.train.adam)?;
        self.g_updates += 1;
        Ok((lg, style_sum))
    }

    /// One discriminator update followed by `g_steps` generator updates,
    /// each on freshly sampled latents and poses. Parameters are left
    /// untouched by an update whose loss is not finite.
    pub fn train_step(&mut self, real: &Tensor<f32>, epoch: u64) -> Result<StepMetrics> {
        let start = Instant::now();
        let s = real.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::shape("train_step", format!("real batch {s:?}")));
        }
        let mut rng = self.step_rng(self.step);
        let (loss_d, loss_style_d) = self.d_update(real, &mut rng)?;
        let mut lg = 0.0;
        let mut ls = 0.0;
        for _ in 0..self.train.g_steps {
            let (a, b) = self.g_update(&mut rng)?;
            lg += a;
            ls += b;
        }
        let k = self.train.g_steps as f64;
        let m = StepMetrics {
            step: self.step,
            epoch,
            loss_d,
            loss_g: lg / k,
            loss_style: ls / k,
            loss_style_d,
            d_updates: self.d_updates,
            g_updates: self.g_updates,
        };
        log::debug!("step {} took {:.3}s", self.step, start.elapsed().as_secs_f64());
        self.step += 1;
        Ok(m)
    }

    /// Run the step at the current counter on its scheduled minibatch.
    pub fn step_on(&mut self, images: &ImageSet) -> Result<StepMetrics> {
        if images.size != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px, model expects {}px",
                images.size, self.model.image_size
            )));
        }
        let idx = self.batch_indices(self.step, images.len())?;
        let mut crop_rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ CROP_SALT);
        crop_rng.set_stream(self.step);
        let batch = images.batch(&idx, &mut crop_rng)?;
        let epoch = self.epoch_of(self.step, images.len());
        self.train_step(&batch, epoch)
    }

    /// Parameters and optimizer moments in one store each.
    pub fn all_params(&self) -> Result<ParamStore> {
        let mut p = self.gen.clone();
        p.extend(self.disc.clone())?;
        Ok(p)
    }
}

const SAMPLE_SALT: u64 = 0x5341_4d50_4c45_5321;

impl Trainer {
    /// Images from a fixed set of latents and poses, for inspecting progress.
    pub fn sample_images(&self, n: usize) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ SAMPLE_SALT);
        let batch = sample_scene_batch(&mut rng, &self.model, &self.train, n);
        render_batch(&self.gen, &self.model, &batch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopOptions {
    pub out_dir: PathBuf,
    /// Stop once this many steps are complete; defaults to the configured epochs.
    pub steps: Option<u64>,
    /// Checkpoint interval in steps; the final step is always saved.
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub sample_count: usize,
    /// Recorded in checkpoints.
    pub dataset: Option<serde_json::Value>,
}

impl LoopOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        LoopOptions {
            out_dir: out_dir.into(),
            steps: None,
            checkpoint_every: 500,
            sample_every: 500,
            sample_count: 16,
            dataset: None,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const LATEST_CHECKPOINT: &str = "latest.bgan";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step{step:07}.bgan"))
}

fn save_progress(trainer: &Trainer, opts: &LoopOptions) -> Result<()> {
    let ckpt = Checkpoint::from_trainer(trainer, opts.dataset.clone());
    let bytes = ckpt.to_bytes()?;
    write_atomic(&checkpoint_path(&opts.out_dir, trainer.step), &bytes)?;
    write_atomic(&opts.out_dir.join(LATEST_CHECKPOINT), &bytes)
}

fn save_samples(trainer: &Trainer, opts: &LoopOptions) -> Result<()> {
    let grid = image_grid(&trainer.sample_images(opts.sample_count)?)?;
    save_png(&grid, &opts.out_dir.join("samples").join(format!("step{:07}.png", trainer.step)))
}

/// Train until `opts.steps` (or the configured epochs) are complete, appending
/// one metrics record per step. On a non-finite loss the current state is
/// written to `nonfinite-step<N>.bgan` with a JSON diagnostic next to it.
pub fn run(
    trainer: &mut Trainer,
    images: &ImageSet,
    opts: &LoopOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if images.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let per_epoch = (images.len() / trainer.train.batch_size) as u64;
    let target = opts.steps.unwrap_or(trainer.train.epochs * per_epoch);
    for sub in ["checkpoints", "samples"] {
        let d = opts.out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = Vec::new();
    while trainer.step < target {
        let m = match trainer.step_on(images) {
            Ok(m) => m,
            Err(e @ Error::NonFinite { .. }) => {
                let snap = opts.out_dir.join(format!("nonfinite-step{}.bgan", trainer.step));
                save_checkpoint(&Checkpoint::from_trainer(trainer, opts.dataset.clone()), &snap)?;
                let diag = serde_json::json!({
                    "error": e.to_string(),
                    "step": trainer.step,
                    "d_updates": trainer.d_updates,
                    "g_updates": trainer.g_updates,
                    "snapshot": snap.display().to_string(),
                });
                let p = snap.with_extension("json");
                fs::write(&p, serde_json::to_vec_pretty(&diag)?).map_err(|err| Error::io(&p, err))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mut line = serde_json::to_vec(&m)?;
        line.push(b'\n');
        log.write_all(&line).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&m);
        out.push(m);
        let done = trainer.step == target;
        if done || (opts.checkpoint_every > 0 && trainer.step % opts.checkpoint_every == 0) {
            save_progress(trainer, opts)?;
        }
        if done || (opts.sample_every > 0 && trainer.step % opts.sample_every == 0) {
            save_samples(trainer, opts)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        let (_, lg) = gan_losses(&[0.0], &[0.0]);
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-15);
        let (ld, _) = gan_losses(&[40.0], &[-40.0]);
        assert!(ld < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real: Vec<f64> = sample_latents(&mut rng, 1, 50).data().iter().map(|&v| 3.0 * v as f64).collect();
        let fake: Vec<f64> = sample_latents(&mut rng, 1, 50).data().iter().map(|&v| 3.0 * v as f64).collect();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let n = real.len() as f64;
        let naive_d = real.iter().map(|&r| -sig(r).ln()).sum::<f64>() / n
            + fake.iter().map(|&f| -(1.0 - sig(f)).ln()).sum::<f64>() / n;
        let naive_g = fake.iter().map(|&f| -sig(f).ln()).sum::<f64>() / n;
        let (ld, lg) = gan_losses(&real, &fake);
        assert!((ld - naive_d).abs() < 1e-8);
        assert!((lg - naive_g).abs() < 1e-8);
    }

    #[test]
    fn graph_losses_match_plain() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::new(&[3, 1], vec![0.5, -1.0, 2.0]).unwrap());
        let f = g.constant(Tensor::new(&[3, 1], vec![-0.3, 0.7, 0.0]).unwrap());
        let ld = discriminator_loss(&mut g, r, f).unwrap();
        let lg = generator_loss(&mut g, f);
        let (pd, pg) = gan_losses(&[0.5, -1.0, 2.0], &[-0.3, 0.7, 0.0]);
        assert!((g.value(ld).data()[0] - pd).abs() < 1e-14);
        assert!((g.value(lg).data()[0] - pg).abs() < 1e-14);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let lgan = g.constant(Tensor::scalar(0.25));
        let s1 = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let s2 = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let t0 = total_generator_loss(&mut g, lgan, &[s1, s2], 0.0).unwrap();
        assert_eq!(t0, lgan);
        let t1 = total_generator_loss(&mut g, lgan, &[s1, s2], 1.0).unwrap();
        let want = 0.25 + 2.0 * std::f64::consts::LN_2;
        assert!((g.value(t1).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn batch_schedule_covers_epoch() {
        let t = Trainer::new(ModelConfig::tiny(), TrainConfig {
            batch_size: 4,
            ..Default::default()
        })
        .unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| t.batch_indices(s, 21).unwrap()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert_ne!(t.batch_indices(0, 21).unwrap(), t.batch_indices(5, 21).unwrap());
        assert!(t.batch_indices(0, 3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.lambda_s = -1.0;
        assert!(c.validate().is_err());
        TrainConfig::natural().validate().unwrap();
        TrainConfig::synthetic(PoseRanges::synth_car()).validate().unwrap();
    }
}
