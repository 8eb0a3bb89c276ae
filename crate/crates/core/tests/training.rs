use blockgan::checkpoint::{load_checkpoint, Checkpoint};
use blockgan::dataset::{render_toy, toy_scene, ImageSet, ToyDatasetConfig};
use blockgan::graph::Graph;
use blockgan::model::{discriminate, generate, style_logits, ModelConfig};
use blockgan::params::collect_grads;
use blockgan::training::{
    generator_loss, run, sample_scene_batch, total_generator_loss, LoopOptions, StepMetrics, TrainConfig, Trainer,
    METRICS_FILE,
};
use blockgan::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_images(n: usize, size: usize) -> ImageSet {
    let cfg = ToyDatasetConfig {
        count: n,
        image_size: size,
        ..Default::default()
    };
    let images = (0..n).map(|i| render_toy(&toy_scene(&cfg, 1, i)).to_tensor()).collect();
    ImageSet::from_tensors(size, images).unwrap()
}

fn tiny_trainer(seed: u64, lambda_s: f64) -> Trainer {
    let train = TrainConfig {
        batch_size: 4,
        lambda_s,
        seed,
        ..Default::default()
    };
    Trainer::new(ModelConfig::tiny(), train).unwrap()
}

fn steps(t: &mut Trainer, data: &ImageSet, n: usize) -> Vec<StepMetrics> {
    (0..n).map(|_| t.step_on(data).unwrap()).collect()
}

#[test]
fn two_generator_updates_per_discriminator_update() {
    let data = toy_images(12, 16);
    let mut t = tiny_trainer(0, 0.0);
    let m = steps(&mut t, &data, 10);
    assert_eq!((t.d_updates, t.g_updates), (10, 20));
    assert_eq!((t.disc_opt.step, t.gen_opt.step), (10, 20));
    assert_eq!(m.last().unwrap().g_updates, 20);
}

#[test]
fn seeded_runs_are_bit_reproducible() {
    let data = toy_images(12, 16);
    let (mut a, mut b) = (tiny_trainer(7, 1.0), tiny_trainer(7, 1.0));
    let (ma, mb) = (steps(&mut a, &data, 10), steps(&mut b, &data, 10));
    assert_eq!(ma, mb);
    assert_eq!(a.gen.max_abs_diff(&b.gen), 0.0);
    assert_eq!(a.disc.max_abs_diff(&b.disc), 0.0);
    let mut c = tiny_trainer(8, 1.0);
    assert_ne!(steps(&mut c, &data, 1)[0], ma[0]);
}

#[test]
fn a_step_moves_both_networks() {
    let data = toy_images(8, 16);
    let mut t = tiny_trainer(1, 0.0);
    let (g0, d0) = (t.gen.clone(), t.disc.clone());
    steps(&mut t, &data, 1);
    assert!(t.gen.max_abs_diff(&g0) > 0.0);
    assert!(t.disc.max_abs_diff(&d0) > 0.0);
}

#[test]
fn without_style_loss_style_heads_are_inert() {
    let data = toy_images(8, 16);
    let mut a = tiny_trainer(3, 0.0);
    let mut b = a.clone();
    let names: Vec<String> = b.disc.names().filter(|n| n.contains("/style")).map(String::from).collect();
    assert!(!names.is_empty());
    for n in &names {
        let t = b.disc.get_mut(n).unwrap();
        *t = t.map(|v| v * -3.0 + 0.5);
    }
    let (ma, mb) = (steps(&mut a, &data, 3), steps(&mut b, &data, 3));
    assert_eq!(ma, mb);
    assert_eq!(a.gen.max_abs_diff(&b.gen), 0.0);
    for (name, t) in a.disc.iter() {
        if !name.contains("/style") {
            assert_eq!(t.max_abs_diff(b.disc.get(name).unwrap()), 0.0, "{name}");
        }
    }
    assert!(ma.iter().all(|m| m.loss_style == 0.0 && m.loss_style_d == 0.0));
}

#[test]
fn style_loss_reaches_the_generator() {
    let t = tiny_trainer(4, 1.0);
    let grads_for = |lambda: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_scene_batch(&mut rng, &t.model, &t.train, 3);
        let mut g = Graph::<f64>::new();
        let gen64 = t.gen.bind(&mut g, true);
        let disc64 = t.disc.bind(&mut g, false);
        let fake = generate(&mut g, &gen64, &t.model, &batch).unwrap().image;
        let d = discriminate(&mut g, &disc64, &t.model, fake).unwrap();
        let l_gan = generator_loss(&mut g, d.logit);
        let style = style_logits(&mut g, &disc64, &d.features).unwrap();
        let loss = total_generator_loss(&mut g, l_gan, &style, lambda).unwrap();
        let grads = g.backward(loss).unwrap();
        collect_grads(&t.gen, &gen64, &grads).unwrap()
    };
    let g0 = grads_for(0.0);
    let g1 = grads_for(1.0);
    let diff: f64 = g0
        .iter()
        .map(|(k, v)| v.max_abs_diff(&g1[k]))
        .fold(0.0, f64::max);
    assert!(diff > 0.0, "style term changes generator gradients");
}

#[test]
fn resume_continues_identically() {
    let data = toy_images(12, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut a = tiny_trainer(9, 1.0);
    let mut opts = LoopOptions::new(dir.path());
    opts.steps = Some(3);
    opts.checkpoint_every = 3;
    run(&mut a, &data, &opts, |_| {}).unwrap();
    let mut b = load_checkpoint(&dir.path().join("latest.bgan")).unwrap().into_trainer().unwrap();
    assert_eq!(b.step, 3);
    let (na, nb) = (a.step_on(&data).unwrap(), b.step_on(&data).unwrap());
    assert_eq!(na, nb);
    assert_eq!(a.gen.max_abs_diff(&b.gen), 0.0);
    assert_eq!(a.disc_opt, b.disc_opt);

    opts.steps = Some(5);
    let mut c = load_checkpoint(&dir.path().join("latest.bgan")).unwrap().into_trainer().unwrap();
    let rest = run(&mut c, &data, &opts, |_| {}).unwrap();
    assert_eq!(rest[0], na);
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["step"], i as u64);
        for k in ["loss_d", "loss_g", "loss_style"] {
            assert!(r[k].as_f64().unwrap().is_finite(), "{k}");
        }
    }
    assert!(dir.path().join("samples/step0000005.png").exists());
    assert!(dir.path().join("checkpoints/step0000003.bgan").exists());
    let ck = Checkpoint::from_trainer(&c, None);
    assert_eq!(ck.meta.step, 5);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let data = toy_images(8, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny_trainer(2, 0.0);
    let w = t.disc.get_mut("disc/fc/b").unwrap();
    *w = Tensor::full(w.shape(), f32::NAN);
    let before = t.disc.clone();
    let mut opts = LoopOptions::new(dir.path());
    opts.steps = Some(4);
    let err = run(&mut t, &data, &opts, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    assert_eq!(t.d_updates, 0);
    assert!(t.disc.get("disc/conv0/k").unwrap().max_abs_diff(before.get("disc/conv0/k").unwrap()) == 0.0);
    assert!(dir.path().join("nonfinite-step0.bgan").exists());
    let diag: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("nonfinite-step0.json")).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("discriminator"));
}

#[test]
fn losses_stay_finite_for_a_hundred_steps() {
    let data = toy_images(16, 16);
    for seed in 0..3 {
        let mut t = tiny_trainer(seed, if seed == 2 { 1.0 } else { 0.0 });
        for m in steps(&mut t, &data, 100) {
            assert!(m.loss_d.is_finite() && m.loss_g.is_finite() && m.loss_style.is_finite(), "{m:?}");
        }
    }
}

#[test]
fn dataset_size_mismatch_is_an_error() {
    let data = toy_images(8, 32);
    let mut t = tiny_trainer(0, 0.0);
    assert!(matches!(t.step_on(&data), Err(Error::Config(_))));
}
