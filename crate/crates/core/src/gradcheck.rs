//! Central finite-difference checks of reverse-mode gradients in f64.
//!
//! The checked function's output is contracted with a fixed random tensor so
//! that every output element contributes a distinct weight. For each input the
//! error is `max |analytic - numeric| / max(max |analytic|, max |numeric|)`
//! over the checked coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{resample_taps, Mat4};
use crate::graph::{Activation, Graph, Padding, ReduceMode, Var};
use crate::model::{discriminate, generate, init_discriminator, init_generator, style_logits, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::training::{sample_scene_batch, TrainConfig};

/// Acceptance threshold for the relative gradient error.
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates perturbed per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-4,
            max_coords: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// Worst relative error across all inputs.
    pub worst_rel_err: f64,
    pub coords_checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < REL_TOL
    }
}

fn contract(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = contract(&mut g, out, weights)?;
    Ok(g.value(loss).data()[0])
}

/// Compare gradients of `build` with respect to every entry of `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], opts: &CheckOptions, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = Tensor::<f64>::randn(g.shape(out), 1.0, &mut rng);
    let loss = contract(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut coords_checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        let picks: Vec<usize> = if input.len() <= opts.max_coords {
            (0..input.len()).collect()
        } else {
            let mut v = sample(&mut rng, input.len(), opts.max_coords).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
        for &j in &picks {
            let orig = input.data()[j];
            perturbed[i] = with_entry(input, j, orig + opts.step);
            let plus = evaluate(&build, &perturbed, &weights)?;
            perturbed[i] = with_entry(input, j, orig - opts.step);
            let minus = evaluate(&build, &perturbed, &weights)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        perturbed[i] = input.clone();
        coords_checked += picks.len();
        let rel = if scale > 0.0 { max_err / scale } else { 0.0 };
        worst = worst.max(rel);
    }
    Ok(CheckReport {
        name: name.to_string(),
        worst_rel_err: worst,
        coords_checked,
    })
}

fn with_entry(t: &Tensor<f64>, j: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[j] = v;
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Random input tensor for checks, entries `N(0, 1)` keyed by `seed`.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn run_shapes<F>(
    out: &mut Vec<CheckReport>,
    opts: &CheckOptions,
    name: &str,
    cases: Vec<Vec<Tensor<f64>>>,
    build: F,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for inputs in cases {
        out.push(check(name, &inputs, opts, &build)?);
    }
    Ok(())
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random_input(s, seed * 31 + i as u64))
        .collect()
}

/// Finite-difference checks of every differentiable op, three shapes each.
pub fn op_suite(opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let mut r = Vec::new();
    let o = opts;
    let cases = |list: &[&[&[usize]]]| -> Vec<Vec<Tensor<f64>>> {
        list.iter().enumerate().map(|(i, s)| inputs(s, i as u64 + 1)).collect()
    };

    // Convolutions.
    for (stride, list) in [
        (1, cases(&[&[&[1, 5, 5, 2], &[3, 3, 2, 3]], &[&[2, 4, 3, 1], &[1, 1, 1, 4]]])),
        (2, cases(&[&[&[2, 6, 7, 3], &[5, 5, 3, 2]]])),
    ] {
        run_shapes(&mut r, o, "conv2d", list, |g, v| g.conv2d(v[0], v[1], stride, Padding::Same))?;
    }
    for (stride, list) in [
        (1, cases(&[&[&[1, 3, 3, 3, 2], &[3, 3, 3, 2, 2]], &[&[1, 2, 3, 2, 1], &[1, 1, 1, 1, 3]]])),
        (2, cases(&[&[&[2, 4, 3, 3, 1], &[3, 3, 3, 1, 2]]])),
    ] {
        run_shapes(&mut r, o, "conv3d", list, |g, v| g.conv3d(v[0], v[1], stride, Padding::Same))?;
    }
    for (stride, list) in [
        (2, cases(&[&[&[1, 3, 3, 2], &[4, 4, 3, 2]], &[&[1, 2, 2, 3], &[3, 3, 1, 3]]])),
        (1, cases(&[&[&[2, 4, 3, 1], &[4, 4, 2, 1]]])),
    ] {
        run_shapes(&mut r, o, "conv_transpose2d", list, |g, v| g.conv_transpose2d(v[0], v[1], stride))?;
    }
    run_shapes(
        &mut r,
        o,
        "conv_transpose3d",
        cases(&[
            &[&[1, 2, 2, 2, 2], &[3, 3, 3, 2, 2]],
            &[&[2, 2, 1, 2, 1], &[3, 3, 3, 3, 1]],
            &[&[1, 3, 2, 2, 2], &[3, 3, 3, 1, 2]],
        ]),
        |g, v| g.conv_transpose3d(v[0], v[1], 2),
    )?;

    // Dense and pointwise ops.
    let mats = cases(&[&[&[1, 3], &[3, 2], &[2]], &[&[4, 5], &[5, 3], &[3]], &[&[2, 1], &[1, 6], &[6]]]);
    run_shapes(&mut r, o, "linear", mats.clone(), |g, v| g.linear(v[0], v[1], Some(v[2])))?;
    run_shapes(&mut r, o, "matmul", mats, |g, v| g.matmul(v[0], v[1]))?;
    let same = |k: usize| -> Vec<Vec<Tensor<f64>>> {
        [vec![7], vec![2, 3, 4], vec![1, 5, 2]]
            .iter()
            .enumerate()
            .map(|(i, s)| (0..k).map(|j| random_input(s, 100 + 10 * i as u64 + j as u64)).collect())
            .collect()
    };
    run_shapes(&mut r, o, "add", same(2), |g, v| g.add(v[0], v[1]))?;
    run_shapes(&mut r, o, "sub", same(2), |g, v| g.sub(v[0], v[1]))?;
    run_shapes(&mut r, o, "mul", same(2), |g, v| g.mul(v[0], v[1]))?;
    run_shapes(&mut r, o, "scale", same(1), |g, v| Ok(g.scale(v[0], -1.7)))?;
    run_shapes(&mut r, o, "add_scalar", same(1), |g, v| Ok(g.add_scalar(v[0], 0.3)))?;
    run_shapes(&mut r, o, "sum", same(1), |g, v| {
        let s = g.sum(v[0]);
        Ok(g.scale(s, 0.5))
    })?;
    run_shapes(&mut r, o, "mean", same(1), |g, v| {
        let m = g.mean(v[0]);
        Ok(g.scale(m, 3.0))
    })?;
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("lrelu", Activation::Lrelu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("softplus", Activation::Softplus),
    ] {
        run_shapes(&mut r, o, name, same(1), |g, v| Ok(g.activation(v[0], kind)))?;
    }
    run_shapes(
        &mut r,
        o,
        "add_bias",
        cases(&[&[&[2, 3], &[3]], &[&[1, 2, 2, 4], &[4]], &[&[2, 1, 2, 2, 1], &[1]]]),
        |g, v| g.add_bias(v[0], v[1]),
    )?;

    // Normalisation and statistics.
    let norm_cases: Vec<Vec<Tensor<f64>>> = [vec![1, 3, 3, 2], vec![2, 2, 3, 2, 3], vec![3, 4, 1]]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (n, c) = (s[0], *s.last().unwrap());
            vec![random_input(s, 200 + i as u64), random_input(&[n, c], 210 + i as u64), random_input(&[n, c], 220 + i as u64)]
        })
        .collect();
    run_shapes(&mut r, o, "adain", norm_cases.clone(), |g, v| g.adain(v[0], v[1], v[2]))?;
    let firsts: Vec<Vec<Tensor<f64>>> = norm_cases.iter().map(|c| vec![c[0].clone()]).collect();
    run_shapes(&mut r, o, "instance_norm", firsts.clone(), |g, v| g.instance_norm(v[0], None, None))?;
    run_shapes(&mut r, o, "moments_batch", firsts.clone(), |g, v| g.moments(v[0], false))?;
    run_shapes(&mut r, o, "moments_instance", firsts, |g, v| g.moments(v[0], true))?;

    // Structural ops.
    let triples = |seed: u64| -> Vec<Vec<Tensor<f64>>> {
        [vec![2, 3], vec![1, 2, 2, 3], vec![4]]
            .iter()
            .enumerate()
            .map(|(i, s)| (0..3).map(|j| random_input(s, seed + 10 * i as u64 + j as u64)).collect())
            .collect()
    };
    for (name, mode) in [("reduce_max", ReduceMode::Max), ("reduce_sum", ReduceMode::Sum), ("reduce_mean", ReduceMode::Mean)] {
        run_shapes(&mut r, o, name, triples(300), |g, v| g.reduce(v, mode))?;
    }
    run_shapes(&mut r, o, "concat", triples(400), |g, v| g.concat(v))?;
    run_shapes(&mut r, o, "batch_concat", triples(500), |g, v| g.batch_concat(v))?;
    let singles = |list: &[&[usize]], seed: u64| -> Vec<Vec<Tensor<f64>>> {
        list.iter().enumerate().map(|(i, s)| vec![random_input(s, seed + i as u64)]).collect()
    };
    run_shapes(&mut r, o, "repeat_batch", singles(&[&[1, 2, 3], &[1, 4], &[1, 2, 1, 2]], 600), |g, v| {
        g.repeat_batch(v[0], 3)
    })?;
    run_shapes(&mut r, o, "batch_slice", singles(&[&[4, 2, 3], &[3, 5], &[5, 1, 2, 2]], 610), |g, v| {
        g.batch_slice(v[0], 1, 2)
    })?;
    run_shapes(&mut r, o, "reshape", singles(&[&[2, 6], &[1, 2, 3, 2], &[12]], 620), |g, v| g.reshape(v[0], &[3, 4]))?;
    run_shapes(
        &mut r,
        o,
        "depth_to_channels",
        singles(&[&[1, 2, 2, 3, 4], &[2, 3, 1, 2, 1], &[1, 1, 2, 4, 2]], 630),
        |g, v| g.depth_to_channels(v[0]),
    )?;
    for (shape, depth) in [([1, 2, 2, 12], 3), ([2, 3, 1, 2], 2), ([1, 1, 2, 8], 4)] {
        run_shapes(&mut r, o, "channels_to_depth", singles(&[&shape], 640), |g, v| {
            g.channels_to_depth(v[0], depth)
        })?;
    }

    // Trilinear resampling under a few transforms.
    let transforms = [
        Mat4::rotation_y(30.0).mul(&Mat4::scaling([0.8, 0.9, 1.1])),
        Mat4::translation([0.23, -0.1, 0.05]),
        {
            let mut m = Mat4::rotation_x(-20.0);
            m.0[3][2] = 0.3;
            m
        },
    ];
    for (i, (dims, m)) in [[4usize, 4, 4], [3, 5, 4], [4, 3, 3]].into_iter().zip(&transforms).enumerate() {
        let taps = resample_taps(dims, m)?;
        let n = 1 + i % 2;
        let x = random_input(&[n, dims[0], dims[1], dims[2], 2], 700 + i as u64);
        let taps = vec![taps; n];
        r.push(check("resample", &[x], o, |g, v| g.resample(v[0], &taps))?);
    }

    Ok(r)
}

fn params_f64(p: &ParamStore, keep: impl Fn(&str) -> bool) -> (Vec<String>, Vec<Tensor<f64>>) {
    p.iter()
        .filter(|(n, _)| keep(n))
        .map(|(n, t)| (n.to_string(), t.cast::<f64>()))
        .unzip()
}

fn bind_inputs(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Options for the composed checks: a smaller step keeps perturbations clear
/// of rectifier kinks in the deep stack.
pub fn composed_options() -> CheckOptions {
    CheckOptions {
        step: 1e-5,
        max_coords: 16,
        ..Default::default()
    }
}

/// Checks of the full generator and discriminator graphs with respect to
/// every parameter tensor.
pub fn composed_suite(model: &ModelConfig, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gen = init_generator(model, &mut rng)?;
    let disc = init_discriminator(model, &mut rng)?;
    let train = TrainConfig::default();
    let batch = sample_scene_batch(&mut rng, model, &train, 2);
    let mut out = Vec::new();

    let (names, tensors) = params_f64(&gen, |_| true);
    out.push(check("generator", &tensors, opts, |g, v| {
        let b = bind_inputs(&names, v);
        Ok(generate(g, &b, model, &batch)?.image)
    })?);

    let s = model.image_size;
    let images = random_input(&[2, s, s, 3], opts.seed ^ 0xd15c).map(|v| v.tanh());
    let (names, mut tensors) = params_f64(&disc, |n| !n.contains("/style"));
    tensors.push(images.clone());
    out.push(check("discriminator", &tensors, opts, |g, v| {
        let b = bind_inputs(&names, &v[..names.len()]);
        Ok(discriminate(g, &b, model, v[names.len()])?.logit)
    })?);

    let (names, tensors) = params_f64(&disc, |_| true);
    out.push(check("style_discriminators", &tensors, opts, |g, v| {
        let b = bind_inputs(&names, v);
        let x = g.constant(images.clone());
        let d = discriminate(g, &b, model, x)?;
        let logits = style_logits(g, &b, &d.features)?;
        g.concat(&logits)
    })?);
    Ok(out)
}

/// Worst relative error and coordinate count per op name, in first-seen order.
pub fn worst_per_op(reports: &[CheckReport]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|(n, _, _)| *n == r.name) {
            Some(e) => {
                e.1 = e.1.max(r.worst_rel_err);
                e.2 += r.coords_checked;
            }
            None => out.push((r.name.clone(), r.worst_rel_err, r.coords_checked)),
        }
    }
    out
}
