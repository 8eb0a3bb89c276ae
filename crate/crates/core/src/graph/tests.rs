use super::*;
use crate::gradcheck::{check, random_input, CheckOptions, REL_TOL};

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// Six-loop reference convolution with same/valid padding, NHWC layout.
fn naive_conv2d(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Tensor<f64> {
    let [n, h, w, ci] = x.shape()[..] else { panic!() };
    let [kh, kw, _, co] = k.shape()[..] else { panic!() };
    let (oh, ow) = out_hw;
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data()[((b * h + iy as usize) * w + ix as usize) * ci + c]
                                    * k.data()[((ky * kw + kx) * ci + c) * co + o];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    t64(&[n, oh, ow, co], out)
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_input(&[1, 4, 5, 3], 1));
    let mut kd = vec![0.0; 9];
    for c in 0..3 {
        kd[c * 3 + c] = 1.0;
    }
    let k = g.constant(t64(&[1, 1, 3, 3], kd));
    let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv2d_ones_center_is_nine() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 3, 3, 1]));
    let k = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[4], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[1], 6.0);
}

#[test]
fn conv2d_matches_naive_loops() {
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        let x = random_input(&[2, 7, 6, 2], 3);
        let k = random_input(&[5, 5, 2, 3], 4);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, stride, padding).unwrap();
        let (oh, ow, pad) = match padding {
            Padding::Same => {
                let oh = 7usize.div_ceil(stride);
                let ow = 6usize.div_ceil(stride);
                let ph = ((oh - 1) * stride + 5).saturating_sub(7) / 2;
                let pw = ((ow - 1) * stride + 5).saturating_sub(6) / 2;
                (oh, ow, (ph, pw))
            }
            Padding::Valid => ((7 - 5) / stride + 1, (6 - 5) / stride + 1, (0, 0)),
        };
        let want = naive_conv2d(&x, &k, stride, pad, (oh, ow));
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn conv2d_rejects_bad_arguments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4, 2]));
    let even = g.constant(Tensor::ones(&[4, 4, 2, 1]));
    assert!(g.conv2d(x, even, 1, Padding::Same).is_err());
    let wrong_c = g.constant(Tensor::ones(&[3, 3, 3, 1]));
    let err = g.conv2d(x, wrong_c, 1, Padding::Same).unwrap_err();
    assert!(err.to_string().contains("axis"), "{err}");
    let k = g.constant(Tensor::ones(&[3, 3, 2, 1]));
    assert!(g.conv2d(x, k, 3, Padding::Same).is_err());
}

#[test]
fn conv_transpose2d_doubles_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 16, 16, 8]));
    let k = g.constant(Tensor::ones(&[4, 4, 4, 8]));
    let y = g.conv_transpose2d(x, k, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 32, 4]);
}

#[test]
fn conv_transpose2d_delta_stamps_kernel() {
    // A unit impulse at input (1, 1) scatters the flipped-free kernel at
    // output rows 2*1 - pad + ky, with pad = (4 - 2) / 2 = 1.
    let mut xd = vec![0.0; 4 * 4];
    xd[4 + 1] = 1.0;
    let kd: Vec<f64> = (0..16).map(|v| v as f64 + 1.0).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 4, 4, 1], xd));
    let k = g.constant(t64(&[4, 4, 1, 1], kd.clone()));
    let y = g.conv_transpose2d(x, k, 2).unwrap();
    let out = g.value(y).data();
    let mut want = vec![0.0; 64];
    for ky in 0..4 {
        for kx in 0..4 {
            let oy = 2 + ky - 1;
            let ox = 2 + kx - 1;
            want[oy * 8 + ox] = kd[ky * 4 + kx];
        }
    }
    assert_eq!(out, &want[..]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (k, s, c) in [(4usize, 2usize, (3usize, 2usize)), (3, 2, (2, 4)), (4, 1, (2, 3)), (5, 2, (1, 1))] {
        let (co, ci) = c;
        let big = random_input(&[2, 8, 6, co], 10 + k as u64);
        let small_hw = (8usize.div_ceil(s), 6usize.div_ceil(s));
        let small = random_input(&[2, small_hw.0, small_hw.1, ci], 20 + k as u64);
        let kern = random_input(&[k, k, co, ci], 30 + k as u64);
        let mut g = Graph::<f64>::new();
        let bv = g.constant(big.clone());
        let sv = g.constant(small.clone());
        let kv = g.constant(kern.clone());
        let conv = g.conv_impl("conv", bv, kv, 2, s, Padding::Same).unwrap();
        let convt = g.conv_transpose2d(sv, kv, s).unwrap();
        let lhs = g.value(conv).dot(&small);
        let rhs = big.dot(g.value(convt));
        assert!(((lhs - rhs) / lhs.abs().max(1e-12)).abs() < 1e-5, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose3d_shapes_and_stamp() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4, 4, 16]));
    let k = g.constant(Tensor::ones(&[3, 3, 3, 8, 16]));
    let y = g.conv_transpose3d(x, k, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 8, 8]);

    // impulse at the origin voxel: pad = (3 - 2) / 2 = 0, so the kernel lands
    // at output offsets 0..3 on each axis
    let mut xd = vec![0.0; 27];
    xd[0] = 1.0;
    let kd: Vec<f64> = (0..27).map(|v| v as f64).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 3, 3, 3, 1], xd));
    let k = g.constant(t64(&[3, 3, 3, 1, 1], kd.clone()));
    let y = g.conv_transpose3d(x, k, 2).unwrap();
    let out = g.value(y).data();
    for a in 0..6 {
        for b in 0..6 {
            for c in 0..6 {
                let want = if a < 3 && b < 3 && c < 3 { kd[(a * 3 + b) * 3 + c] } else { 0.0 };
                assert_eq!(out[(a * 6 + b) * 6 + c], want);
            }
        }
    }
}

#[test]
fn linear_hand_arithmetic() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 1], vec![3.0]));
    let w = g.constant(t64(&[1, 1], vec![2.0]));
    let b = g.constant(t64(&[1], vec![1.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);

    let x = g.constant(random_input(&[2, 3], 5));
    let mut eye = vec![0.0; 9];
    eye[0] = 1.0;
    eye[4] = 1.0;
    eye[8] = 1.0;
    let w = g.constant(t64(&[3, 3], eye));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let bad = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[4], vec![-1.0, 2.0, 0.0, -3.0]));
    let r = g.activation(x, Activation::Relu);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0, 0.0]);
    let l = g.activation(x, Activation::Lrelu);
    assert_eq!(g.value(l).data()[0], -0.2);
    let s = g.activation(x, Activation::Sigmoid);
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn instance_stats_formulas() {
    let mut g = Graph::<f64>::new();
    // channel 0 constant 4, channel 1 takes {1, 3}
    let x = g.constant(t64(&[1, 2, 1, 2], vec![4.0, 1.0, 4.0, 3.0]));
    let m = g.moments(x, true).unwrap();
    let v = g.value(m).data();
    assert_eq!(v[0], 4.0);
    assert_eq!(v[1], 2.0);
    assert!((v[2] - STD_EPS.sqrt()).abs() < 1e-15);
    assert!((v[3] - (1.0 + STD_EPS).sqrt()).abs() < 1e-15);
}

#[test]
fn adain_sets_channel_statistics() {
    let x = random_input(&[2, 4, 4, 3], 7);
    let gamma = t64(&[2, 3], vec![1.5, -0.5, 2.0, 0.7, 1.0, 3.0]);
    let beta = t64(&[2, 3], vec![0.1, -2.0, 5.0, 0.0, 1.0, -1.0]);
    let mut g = Graph::<f64>::new();
    let (xv, gv, bv) = (g.constant(x), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.adain(xv, gv, bv).unwrap();
    let m = g.moments(y, true).unwrap();
    let stats = g.value(m).data();
    for n in 0..2 {
        for c in 0..3 {
            assert!((stats[n * 6 + c] - beta.data()[n * 3 + c]).abs() < 1e-4);
            assert!((stats[n * 6 + 3 + c] - gamma.data()[n * 3 + c].abs()).abs() < 1e-4);
        }
    }

    // constant input collapses to beta
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::full(&[2, 4, 4, 3], 2.5));
    let (gv, bv) = (g.constant(gamma), g.constant(beta.clone()));
    let y = g.adain(xv, gv, bv).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let n = i / 48;
        assert!((v - beta.data()[n * 3 + i % 3]).abs() < 1e-9);
    }
}

#[test]
fn plain_instance_norm_standardizes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_input(&[1, 5, 5, 2], 8));
    let y = g.instance_norm(x, None, None).unwrap();
    let m = g.moments(y, true).unwrap();
    let s = g.value(m).data();
    assert!(s[0].abs() < 1e-12 && s[1].abs() < 1e-12);
    assert!((s[2] - 1.0).abs() < 1e-4 && (s[3] - 1.0).abs() < 1e-4);
}

#[test]
fn reduce_max_and_sum() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[2], vec![1.0, 5.0]));
    let b = g.constant(t64(&[2], vec![3.0, 2.0]));
    let m = g.reduce(&[a, b], ReduceMode::Max).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    let s = g.reduce(&[a, b], ReduceMode::Sum).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 7.0]);
    assert!(g.reduce(&[], ReduceMode::Max).is_err());
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(g.reduce(&[a, c], ReduceMode::Max).is_err());
}

#[test]
fn reduce_max_ties_go_to_lowest_index() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(t64(&[2], vec![1.0, 2.0]));
    let b = g.variable(t64(&[2], vec![1.0, 3.0]));
    let m = g.reduce(&[a, b], ReduceMode::Max).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn depth_to_channels_layout() {
    let x = random_input(&[1, 2, 3, 4, 5], 9);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = g.depth_to_channels(xv).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 3, 20]);
    let yd = g.value(y).data();
    for h in 0..2 {
        for w in 0..3 {
            for d in 0..4 {
                for c in 0..5 {
                    let src = x.data()[(((h * 3) + w) * 4 + d) * 5 + c];
                    assert_eq!(yd[((h * 3) + w) * 20 + d * 5 + c], src);
                }
            }
        }
    }
    let back = g.channels_to_depth(y, 4).unwrap();
    assert_eq!(g.value(back), &x);

    let mut g = Graph::<f32>::new();
    let big = g.constant(Tensor::zeros(&[1, 16, 16, 16, 64]));
    let flat = g.depth_to_channels(big).unwrap();
    assert_eq!(g.shape(flat), &[1, 16, 16, 1024]);
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let w = g.variable(random_input(&[3, 2], 1));
    let unused = g.variable(random_input(&[2], 2));
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(w).unwrap(), &Tensor::ones(&[3, 2]));
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zeros(unused, &[2]), Tensor::zeros(&[2]));
    assert!(g.backward(w).is_err());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_input(&[2, 8, 8, 3], 1).cast());
        let k = g.constant(random_input(&[5, 5, 3, 4], 2).cast());
        let y = g.conv2d(x, k, 2, Padding::Same).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

fn opts() -> CheckOptions {
    CheckOptions {
        max_coords: 40,
        ..CheckOptions::default()
    }
}

fn assert_check<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check(name, inputs, &opts(), build).unwrap();
    assert!(r.worst_rel_err < REL_TOL, "{name}: rel err {}", r.worst_rel_err);
}

#[test]
fn gradcheck_conv2d() {
    for (i, (shape, ks, s)) in [
        ([1, 5, 5, 2], [3, 3, 2, 3], 1),
        ([2, 6, 7, 3], [5, 5, 3, 2], 2),
        ([1, 4, 4, 1], [1, 1, 1, 4], 1),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [random_input(&shape, i as u64), random_input(&ks, 100 + i as u64)];
        assert_check("conv2d", &inputs, |g, v| g.conv2d(v[0], v[1], s, Padding::Same));
    }
}

#[test]
fn gradcheck_conv_transpose() {
    for (i, (shape, ks, s)) in [
        ([1, 3, 3, 2], [4, 4, 3, 2], 2),
        ([2, 4, 3, 1], [4, 4, 2, 1], 1),
        ([1, 2, 2, 3], [3, 3, 1, 3], 2),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [random_input(&shape, i as u64), random_input(&ks, 50 + i as u64)];
        assert_check("conv_transpose2d", &inputs, |g, v| g.conv_transpose2d(v[0], v[1], s));
    }
    for (i, (shape, ks)) in [
        ([1, 2, 2, 2, 2], [3, 3, 3, 2, 2]),
        ([2, 2, 1, 2, 1], [3, 3, 3, 3, 1]),
        ([1, 3, 2, 2, 2], [3, 3, 3, 1, 2]),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [random_input(&shape, 7 + i as u64), random_input(&ks, 70 + i as u64)];
        assert_check("conv_transpose3d", &inputs, |g, v| g.conv_transpose3d(v[0], v[1], 2));
    }
}

#[test]
fn gradcheck_linear_and_activations() {
    for (i, (n, din, dout)) in [(1, 3, 2), (4, 5, 3), (2, 1, 6)].into_iter().enumerate() {
        let inputs = [
            random_input(&[n, din], i as u64),
            random_input(&[din, dout], 10 + i as u64),
            random_input(&[dout], 20 + i as u64),
        ];
        assert_check("linear", &inputs, |g, v| g.linear(v[0], v[1], Some(v[2])));
    }
    for kind in [Activation::Relu, Activation::Lrelu, Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
        for (i, shape) in [vec![7], vec![2, 3, 4], vec![1, 5, 2]].into_iter().enumerate() {
            let inputs = [random_input(&shape, 40 + i as u64)];
            assert_check("activation", &inputs, |g, v| Ok(g.activation(v[0], kind)));
        }
    }
}

#[test]
fn gradcheck_adain_and_moments() {
    for (i, shape) in [vec![1, 3, 3, 2], vec![2, 2, 3, 2, 3], vec![3, 4, 1]].into_iter().enumerate() {
        let n = shape[0];
        let c = *shape.last().unwrap();
        let inputs = [
            random_input(&shape, i as u64),
            random_input(&[n, c], 10 + i as u64),
            random_input(&[n, c], 20 + i as u64),
        ];
        assert_check("adain", &inputs, |g, v| g.adain(v[0], v[1], v[2]));
        assert_check("instance_norm", &inputs[..1], |g, v| g.instance_norm(v[0], None, None));
        assert_check("moments", &inputs[..1], |g, v| g.moments(v[0], false));
        assert_check("moments", &inputs[..1], |g, v| g.moments(v[0], true));
    }
}

#[test]
fn gradcheck_structural_ops() {
    for (i, shape) in [vec![2, 3], vec![1, 2, 2, 3], vec![4]].into_iter().enumerate() {
        let inputs = [
            random_input(&shape, i as u64),
            random_input(&shape, 10 + i as u64),
            random_input(&shape, 20 + i as u64),
        ];
        assert_check("reduce_max", &inputs, |g, v| g.reduce(v, ReduceMode::Max));
        assert_check("reduce_sum", &inputs, |g, v| g.reduce(v, ReduceMode::Sum));
        assert_check("reduce_mean", &inputs, |g, v| g.reduce(v, ReduceMode::Mean));
        assert_check("concat", &inputs, |g, v| g.concat(v));
        assert_check("batch_concat", &inputs, |g, v| g.batch_concat(v));
        assert_check("mul", &inputs[..2], |g, v| g.mul(v[0], v[1]));
        assert_check("sub", &inputs[..2], |g, v| g.sub(v[0], v[1]));
        assert_check("mean", &inputs[..1], |g, v| {
            let m = g.mean(v[0]);
            Ok(g.scale(m, 3.0))
        });
    }
    let inputs = [random_input(&[1, 2, 3], 3)];
    assert_check("repeat_batch", &inputs, |g, v| g.repeat_batch(v[0], 3));
    let inputs = [random_input(&[4, 2, 3], 4)];
    assert_check("batch_slice", &inputs, |g, v| g.batch_slice(v[0], 1, 2));
    let inputs = [random_input(&[1, 2, 2, 3, 4], 5)];
    assert_check("depth_to_channels", &inputs, |g, v| g.depth_to_channels(v[0]));
}

#[test]
fn gradcheck_composite_conv_adain_relu() {
    let inputs = [
        random_input(&[2, 5, 5, 2], 1),
        random_input(&[3, 3, 2, 3], 2),
        random_input(&[2, 3], 3),
        random_input(&[2, 3], 4),
    ];
    assert_check("conv_adain_relu", &inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], 1, Padding::Same)?;
        let y = g.adain(y, v[2], v[3])?;
        let y = g.activation(y, Activation::Relu);
        Ok(g.sum(y))
    });
}

#[test]
fn op_suite_covers_every_op() {
    let reports = crate::gradcheck::op_suite(&CheckOptions::default()).unwrap();
    for (name, worst, coords) in crate::gradcheck::worst_per_op(&reports) {
        assert!(worst < REL_TOL, "{name}: {worst:e} over {coords} coordinates");
    }
    for name in ["conv3d", "add", "add_bias", "matmul", "resample", "channels_to_depth", "reshape", "scale", "add_scalar", "sum"] {
        assert!(reports.iter().filter(|r| r.name == name).count() >= 3, "{name}");
    }
}
