//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output and
//! whatever it needs for the backward pass. Nodes are only ever appended, so
//! the tape order is a topological order and [`Graph::backward`] walks it in
//! reverse, visiting each node once.

mod conv;
mod kernels;

pub use conv::Padding;
pub(crate) use conv::ConvGeom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Variance guard used by every standard-deviation computation.
pub const STD_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Leaky ReLU with negative slope 0.2.
    Lrelu,
    Sigmoid,
    Tanh,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Identity,
}

pub const LRELU_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Lrelu => {
                if x > 0.0 {
                    x
                } else {
                    LRELU_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    /// Gradient flows to the first input holding the maximum.
    Max,
    Sum,
    /// Mean with per-element summation in sorted order, so the result does
    /// not depend on input order.
    Mean,
}

/// Trilinear sampling stencil for one batch item: for each output voxel, eight
/// source voxel indices and weights. Zero weight marks an out-of-volume corner.
#[derive(Clone, Debug)]
pub struct Taps {
    pub index: Vec<[u32; 8]>,
    pub weight: Vec<[f64; 8]>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        spatial: usize,
        channels: usize,
    },
    Moments {
        x: Var,
        groups: usize,
        per_group: usize,
        channels: usize,
        mean: Vec<T>,
        sigma: Vec<T>,
    },
    Reduce {
        inputs: Vec<Var>,
        mode: ReduceMode,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    Resample {
        x: Var,
        taps: Vec<(Vec<[u32; 8]>, Vec<[T; 8]>)>,
        in_voxels: usize,
        channels: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    RepeatBatch {
        x: Var,
        times: usize,
    },
    BatchSlice {
        x: Var,
        start: usize,
    },
    BatchConcat(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing upstream needs a gradient, so the op record can be dropped.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        record: Op<T>,
    ) -> Result<Var> {
        check_same(op, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, record, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Adds `bias` (`[C]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = crate::tensor::matmul(m, k, n, self.data(a), self.data(b));
        let value = Tensor::from_parts(vec![m, n], data);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Fully connected layer: `x` is `[N, in]`, `weight` is `[in, out]`, `bias` is `[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        kernel: Var,
        spatial: usize,
        stride: usize,
        padding: Padding,
        transpose: bool,
    ) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != spatial + 2 || ks.len() != spatial + 2 {
            return Err(Error::shape(
                op,
                format!("input {xs:?} / kernel {ks:?} must have rank {}", spatial + 2),
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(op, format!("stride {stride} not in {{1,2}}")));
        }
        let mut sp = [1; 3];
        let mut kk = [1; 3];
        let mut st = [1; 3];
        for a in 0..spatial {
            sp[a] = xs[1 + a];
            kk[a] = ks[a];
            st[a] = stride;
        }
        let (kin, kout) = (ks[spatial], ks[spatial + 1]);
        let cx = xs[spatial + 1];
        if transpose {
            // kernel [k..., out, in]; the adjoint conv maps `out` channels to `in`.
            if cx != kout {
                return Err(Error::shape(
                    op,
                    format!("input channels {cx} (axis {}) vs kernel in-channels {kout} (axis {})", spatial + 1, spatial + 1),
                ));
            }
            let big: Vec<usize> = sp.iter().zip(&st).map(|(s, t)| s * t).collect();
            let g = ConvGeom::new(
                xs[0],
                [big[0], big[1], big[2]],
                kk,
                st,
                Padding::Same,
                kin,
                kout,
            )?;
            debug_assert_eq!(g.output, sp);
            Ok(g)
        } else {
            if cx != kin {
                return Err(Error::shape(
                    op,
                    format!("input channels {cx} (axis {}) vs kernel in-channels {kin} (axis {spatial})", spatial + 1),
                ));
            }
            ConvGeom::new(xs[0], sp, kk, st, padding, kin, kout)
        }
    }

    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        kernel: Var,
        spatial: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = self.conv_geom(op, x, kernel, spatial, stride, padding, false)?;
        let data = conv::conv_forward(self.data(x), self.data(kernel), &geom);
        let mut shape = vec![geom.batch];
        shape.extend_from_slice(&geom.output[..spatial]);
        shape.push(geom.cout);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Conv { x, kernel, geom }, &[x, kernel]))
    }

    /// 2-D convolution. `x` is `[N, H, W, Cin]`, `kernel` is `[kh, kw, Cin, Cout]`
    /// with odd spatial extents.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(kernel);
        if ks.len() == 4 && (ks[0] % 2 == 0 || ks[1] % 2 == 0) {
            return Err(Error::invalid("conv2d", format!("kernel extents {ks:?} must be odd")));
        }
        self.conv_impl("conv2d", x, kernel, 2, stride, padding)
    }

    /// 3-D convolution. `x` is `[N, H, W, D, Cin]`, `kernel` is `[k, k, k, Cin, Cout]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv_impl("conv3d", x, kernel, 3, stride, padding)
    }

    fn conv_transpose_impl(
        &mut self,
        op: &'static str,
        x: Var,
        kernel: Var,
        spatial: usize,
        stride: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(op, x, kernel, spatial, stride, Padding::Same, true)?;
        let data = conv::conv_transpose_forward(self.data(x), self.data(kernel), &geom);
        let mut shape = vec![geom.batch];
        shape.extend_from_slice(&geom.input[..spatial]);
        shape.push(geom.cin);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::ConvTranspose { x, kernel, geom }, &[x, kernel]))
    }

    /// Transposed 2-D convolution, the adjoint of a same-padded [`Graph::conv2d`].
    /// `x` is `[N, H, W, Cin]`, `kernel` is `[kh, kw, Cout, Cin]`; output is
    /// `[N, H*stride, W*stride, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.conv_transpose_impl("conv_transpose2d", x, kernel, 2, stride)
    }

    /// 3-D analogue of [`Graph::conv_transpose2d`]; kernel `[k, k, k, Cout, Cin]`.
    pub fn conv_transpose3d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.conv_transpose_impl("conv_transpose3d", x, kernel, 3, stride)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| T::from_f64(kind.apply(v.as_f64())));
        self.push(value, Op::Act { x, kind }, &[x])
    }

    /// Per-instance, per-channel normalization over all spatial positions,
    /// followed by an optional per-instance affine. `x` is `[N, ..., C]`;
    /// `gamma` and `beta` are `[N, C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("instance_norm", format!("input {xs:?} needs rank >= 2")));
        }
        let n = xs[0];
        let c = xs[xs.len() - 1];
        let spatial = xs[1..xs.len() - 1].iter().product::<usize>();
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [n, c] {
                return Err(Error::shape(
                    "instance_norm",
                    format!("affine {:?} for input {xs:?}", self.shape(p)),
                ));
            }
        }
        let (xhat, inv_std) = kernels::normalize(self.data(x), n, spatial, c, T::from_f64(STD_EPS));
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gd = gamma.map(|g| self.data(g));
            let bd = beta.map(|b| self.data(b));
            for i in 0..n {
                for s in 0..spatial {
                    let row = &mut out[(i * spatial + s) * c..(i * spatial + s + 1) * c];
                    for (ch, o) in row.iter_mut().enumerate() {
                        if let Some(g) = gd {
                            *o = *o * g[i * c + ch];
                        }
                        if let Some(b) = bd {
                            *o += b[i * c + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                channels: c,
            },
            &inputs,
        ))
    }

    /// Adaptive instance normalization: output channel statistics become
    /// `(beta, |gamma|)`.
    pub fn adain(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.instance_norm(x, Some(gamma), Some(beta))
    }

    /// Channel mean and `sqrt(var + eps)` (biased variance) of `x` (`[N, ..., C]`).
    /// With `per_instance` the output is `[N, 2C]`, otherwise statistics pool
    /// the batch too and the output is `[1, 2C]`. Means precede deviations.
    pub fn moments(&mut self, x: Var, per_instance: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("moments", format!("input {xs:?} needs rank >= 2")));
        }
        let c = xs[xs.len() - 1];
        let total = xs[..xs.len() - 1].iter().product::<usize>();
        let groups = if per_instance { xs[0] } else { 1 };
        let per_group = total / groups;
        let (mean, sigma) =
            kernels::channel_moments(self.data(x), groups, per_group, c, T::from_f64(STD_EPS));
        let mut data = Vec::with_capacity(groups * 2 * c);
        for gi in 0..groups {
            data.extend_from_slice(&mean[gi * c..(gi + 1) * c]);
            data.extend_from_slice(&sigma[gi * c..(gi + 1) * c]);
        }
        let value = Tensor::from_parts(vec![groups, 2 * c], data);
        Ok(self.push(
            value,
            Op::Moments {
                x,
                groups,
                per_group,
                channels: c,
                mean,
                sigma,
            },
            &[x],
        ))
    }

    /// Elementwise reduction across equally shaped tensors.
    pub fn reduce(&mut self, inputs: &[Var], mode: ReduceMode) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("reduce_elementwise", "empty input list"))?;
        let shape = self.shape(first).to_vec();
        for &v in &inputs[1..] {
            check_same("reduce_elementwise", &shape, self.shape(v))?;
        }
        let len = self.value(first).len();
        let srcs: Vec<&[T]> = inputs.iter().map(|&v| self.data(v)).collect();
        let mut argmax = Vec::new();
        let data: Vec<T> = match mode {
            ReduceMode::Max => {
                argmax = vec![0u32; len];
                let mut out = srcs[0].to_vec();
                for (k, s) in srcs.iter().enumerate().skip(1) {
                    for i in 0..len {
                        if s[i] > out[i] {
                            out[i] = s[i];
                            argmax[i] = k as u32;
                        }
                    }
                }
                out
            }
            ReduceMode::Sum => {
                let mut out = srcs[0].to_vec();
                for s in &srcs[1..] {
                    for (o, &v) in out.iter_mut().zip(s.iter()) {
                        *o += v;
                    }
                }
                out
            }
            ReduceMode::Mean => {
                let denom = T::from_f64(srcs.len() as f64);
                let mut buf = vec![T::zero(); srcs.len()];
                (0..len)
                    .map(|i| {
                        for (b, s) in buf.iter_mut().zip(&srcs) {
                            *b = s[i];
                        }
                        buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                        buf.iter().fold(T::zero(), |acc, &v| acc + v) / denom
                    })
                    .collect()
            }
        };
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Reduce {
                inputs: inputs.to_vec(),
                mode,
                argmax,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[N, H, W, D, C]` to `[N, H, W, D*C]`; element `(h, w, d, c)` lands at
    /// channel `d*C + c`, which is exactly the row-major relayout.
    pub fn depth_to_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("reshape_depth_to_channels", format!("input {s:?} needs rank 5")));
        }
        self.reshape(x, &[s[0], s[1], s[2], s[3] * s[4]])
    }

    /// Inverse of [`Graph::depth_to_channels`].
    pub fn channels_to_depth(&mut self, x: Var, depth: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[3] % depth != 0 {
            return Err(Error::shape("channels_to_depth", format!("input {s:?}, depth {depth}")));
        }
        self.reshape(x, &[s[0], s[1], s[2], depth, s[3] / depth])
    }

    /// Trilinear resampling of `[N, H, W, D, C]` features with one stencil per batch item.
    pub fn resample(&mut self, x: Var, taps: &[Taps]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || taps.len() != s[0] {
            return Err(Error::shape(
                "resample_grid",
                format!("input {s:?} with {} stencils", taps.len()),
            ));
        }
        let voxels = s[1] * s[2] * s[3];
        let c = s[4];
        let converted: Vec<(Vec<[u32; 8]>, Vec<[T; 8]>)> = taps
            .iter()
            .map(|t| {
                let w = t.weight.iter().map(|w| w.map(T::from_f64)).collect();
                (t.index.clone(), w)
            })
            .collect();
        for (idx, _) in &converted {
            if idx.len() != voxels {
                return Err(Error::shape("resample_grid", "stencil size vs grid"));
            }
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (n, (idx, w)) in converted.iter().enumerate() {
            kernels::apply_taps(
                &src[n * voxels * c..(n + 1) * voxels * c],
                idx,
                w,
                c,
                &mut out[n * voxels * c..(n + 1) * voxels * c],
            );
        }
        let value = Tensor::from_parts(s, out);
        Ok(self.push(
            value,
            Op::Resample {
                x,
                taps: converted,
                in_voxels: voxels,
                channels: c,
            },
            &[x],
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "empty input list"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            inputs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Tiles a `[1, ...]` tensor `times` along the leading axis.
    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s[0] != 1 || times == 0 {
            return Err(Error::shape("repeat_batch", format!("input {s:?}, times {times}")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = times;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::RepeatBatch { x, times }, &[x]))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn batch_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape("batch_slice", format!("{start}..{} of {s:?}", start + len)));
        }
        let per = self.value(x).len() / s[0];
        let data = self.data(x)[start * per..(start + len) * per].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::BatchSlice { x, start }, &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn batch_concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("batch_concat", "empty input list"))?;
        let inner = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != inner[..] {
                return Err(Error::shape("batch_concat", format!("{s:?} vs inner {inner:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![rows];
        shape.extend(inner);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::BatchConcat(inputs.to_vec()), inputs))
    }

    /// Gradients of the scalar `loss` with respect to every leaf created by
    /// [`Graph::variable`] that it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((o, &v), &y) in d.iter_mut().zip(g).zip(bv) {
                        *o += v * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, &v), &x) in d.iter_mut().zip(g).zip(av) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (o, &v) in d.iter_mut().zip(g) {
                    *o += v * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let c = d.len();
                    for row in g.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G * B^T
                acc(*a, &mut |d| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), d, k as isize, 1)
                });
                // dB = A^T * G
                acc(*b, &mut |d| {
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), d, n as isize, 1)
                });
            }
            Op::Conv { x, kernel, geom } => {
                let (xv, kv) = (self.data(*x), self.data(*kernel));
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[kernel.0].requires_grad;
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dk = need_k.then(|| vec![T::zero(); kv.len()]);
                conv::conv_backward(xv, kv, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    acc(*kernel, &mut |d| add_into(d, &dk));
                }
            }
            Op::ConvTranspose { x, kernel, geom } => {
                let (xv, kv) = (self.data(*x), self.data(*kernel));
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[kernel.0].requires_grad;
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dk = need_k.then(|| vec![T::zero(); kv.len()]);
                conv::conv_transpose_backward(xv, kv, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    acc(*kernel, &mut |d| add_into(d, &dk));
                }
            }
            Op::Act { x, kind } => {
                let xv = self.data(*x);
                let yv = node.value.data();
                let slope = T::from_f64(LRELU_SLOPE);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        let local = match kind {
                            Activation::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Lrelu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    slope
                                }
                            }
                            Activation::Sigmoid => yv[i] * (T::one() - yv[i]),
                            Activation::Tanh => T::one() - yv[i] * yv[i],
                            Activation::Softplus => T::from_f64(sigmoid(xv[i].as_f64())),
                            Activation::Identity => T::one(),
                        };
                        d[i] += g[i] * local;
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                channels,
            } => {
                let (s, c) = (*spatial, *channels);
                let n = inv_std.len() / c;
                if let Some(b) = beta {
                    acc(*b, &mut |d| {
                        for i in 0..n {
                            for p in 0..s {
                                let row = &g[(i * s + p) * c..(i * s + p + 1) * c];
                                add_into(&mut d[i * c..(i + 1) * c], row);
                            }
                        }
                    });
                }
                if let Some(gm) = gamma {
                    acc(*gm, &mut |d| {
                        for i in 0..n {
                            for p in 0..s {
                                let base = (i * s + p) * c;
                                for ch in 0..c {
                                    d[i * c + ch] += g[base + ch] * xhat[base + ch];
                                }
                            }
                        }
                    });
                }
                if self.nodes[x.0].requires_grad {
                    // dxhat = g * gamma
                    let dxhat: Vec<T> = match gamma {
                        Some(gm) => {
                            let gv = self.data(*gm);
                            g.iter()
                                .enumerate()
                                .map(|(idx, &v)| {
                                    let i = idx / (s * c);
                                    v * gv[i * c + idx % c]
                                })
                                .collect()
                        }
                        None => g.to_vec(),
                    };
                    let dx = kernels::normalize_backward(&dxhat, xhat, inv_std, n, s, c);
                    acc(*x, &mut |d| add_into(d, &dx));
                }
            }
            Op::Moments {
                x,
                groups,
                per_group,
                channels,
                mean,
                sigma,
            } => {
                let (gs, m, c) = (*groups, *per_group, *channels);
                let xv = self.data(*x);
                acc(*x, &mut |d| {
                    let inv_m = T::one() / T::from_f64(m as f64);
                    for gi in 0..gs {
                        let gmu = &g[gi * 2 * c..gi * 2 * c + c];
                        let gsig = &g[gi * 2 * c + c..(gi + 1) * 2 * c];
                        for r in 0..m {
                            let base = (gi * m + r) * c;
                            for ch in 0..c {
                                let mu = mean[gi * c + ch];
                                let sg = sigma[gi * c + ch];
                                d[base + ch] += inv_m * (gmu[ch] + gsig[ch] * (xv[base + ch] - mu) / sg);
                            }
                        }
                    }
                });
            }
            Op::Reduce {
                inputs,
                mode,
                argmax,
            } => match mode {
                ReduceMode::Max => {
                    for (k, &v) in inputs.iter().enumerate() {
                        acc(v, &mut |d| {
                            for (i, o) in d.iter_mut().enumerate() {
                                if argmax[i] as usize == k {
                                    *o += g[i];
                                }
                            }
                        });
                    }
                }
                ReduceMode::Sum => {
                    for &v in inputs {
                        acc(v, &mut |d| add_into(d, g));
                    }
                }
                ReduceMode::Mean => {
                    let w = T::one() / T::from_f64(inputs.len() as f64);
                    for &v in inputs {
                        acc(v, &mut |d| {
                            for (o, &gv) in d.iter_mut().zip(g) {
                                *o += gv * w;
                            }
                        });
                    }
                }
            },
            Op::Resample {
                x,
                taps,
                in_voxels,
                channels,
            } => acc(*x, &mut |d| {
                let block = in_voxels * channels;
                for (n, (idx, w)) in taps.iter().enumerate() {
                    kernels::scatter_taps(
                        &g[n * block..(n + 1) * block],
                        idx,
                        w,
                        *channels,
                        &mut d[n * block..(n + 1) * block],
                    );
                }
            }),
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SumAll(x) => acc(*x, &mut |d| {
                for o in d.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::MeanAll(x) => acc(*x, &mut |d| {
                let v = g[0] / T::from_f64(d.len() as f64);
                for o in d.iter_mut() {
                    *o += v;
                }
            }),
            Op::RepeatBatch { x, times } => acc(*x, &mut |d| {
                let per = d.len();
                for t in 0..*times {
                    add_into(d, &g[t * per..(t + 1) * per]);
                }
            }),
            Op::BatchSlice { x, start } => {
                let total = self.nodes[x.0].value.len();
                let per = total / self.nodes[x.0].value.shape()[0];
                acc(*x, &mut |d| add_into(&mut d[start * per..start * per + g.len()], g));
            }
            Op::BatchConcat(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.len();
                    acc(v, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], but an unreached leaf yields zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests;
