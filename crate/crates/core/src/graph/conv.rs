//! im2col based convolution kernels shared by the 2-D and 3-D ops.
//!
//! Every convolution is expressed over three spatial axes; 2-D inputs carry a
//! unit depth axis. Layouts are channels-last: inputs `[N, S0, S1, S2, C]`,
//! kernels `[K0, K1, K2, Cin, Cout]`.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; padding split with the smaller half first.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

/// Geometry of a forward convolution from `input` to `output` spatial extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(Error::invalid("conv", "stride must be positive"));
            }
            match padding {
                Padding::Same => {
                    output[a] = input[a].div_ceil(stride[a]);
                    let needed = (output[a] - 1) * stride[a] + kernel[a];
                    pad[a] = needed.saturating_sub(input[a]) / 2;
                }
                Padding::Valid => {
                    if input[a] < kernel[a] {
                        return Err(Error::shape(
                            "conv",
                            format!("axis {a}: input {} smaller than kernel {}", input[a], kernel[a]),
                        ));
                    }
                    output[a] = (input[a] - kernel[a]) / stride[a] + 1;
                }
            }
        }
        Ok(ConvGeom {
            batch,
            input,
            output,
            kernel,
            stride,
            pad,
            cin,
            cout,
        })
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Columns of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.kernel_volume() * self.cin
    }

    /// Forward multiply-accumulate count.
    #[allow(dead_code)]
    pub fn macs(&self) -> usize {
        self.batch * self.out_voxels() * self.patch_len() * self.cout
    }

    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        if p >= 0 && (p as usize) < self.input[axis] {
            Some(p as usize)
        } else {
            None
        }
    }
}

/// Unfold `x` (`[batch, input..., cin]`) into `[batch * out_voxels, patch_len]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.batch * g.out_voxels() * patch];
    let [_, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let [k0, k1, k2] = g.kernel;
    let cin = g.cin;
    let mut row = 0;
    for n in 0..g.batch {
        let xb = &x[n * g.in_voxels() * cin..(n + 1) * g.in_voxels() * cin];
        for a in 0..o0 {
            for b in 0..o1 {
                for c in 0..o2 {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for ka in 0..k0 {
                        let sa = g.source(0, a, ka);
                        for kb in 0..k1 {
                            let sb = g.source(1, b, kb);
                            for kc in 0..k2 {
                                let sc = g.source(2, c, kc);
                                if let (Some(pa), Some(pb), Some(pc)) = (sa, sb, sc) {
                                    let src = ((pa * i1 + pb) * i2 + pc) * cin;
                                    dst[off..off + cin].copy_from_slice(&xb[src..src + cin]);
                                }
                                off += cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch_len();
    let [_i0, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let [k0, k1, k2] = g.kernel;
    let cin = g.cin;
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_voxels() * cin;
        for a in 0..o0 {
            for b in 0..o1 {
                for c in 0..o2 {
                    let src = &cols[row * patch..(row + 1) * patch];
                    let mut off = 0;
                    for ka in 0..k0 {
                        let sa = g.source(0, a, ka);
                        for kb in 0..k1 {
                            let sb = g.source(1, b, kb);
                            for kc in 0..k2 {
                                let sc = g.source(2, c, kc);
                                if let (Some(pa), Some(pb), Some(pc)) = (sa, sb, sc) {
                                    let d = base + ((pa * i1 + pb) * i2 + pc) * cin;
                                    for (o, &v) in dx[d..d + cin].iter_mut().zip(&src[off..off + cin]) {
                                        *o += v;
                                    }
                                }
                                off += cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y = im2col(x) * K`.
pub(crate) fn conv_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let rows = g.batch * g.out_voxels();
    let patch = g.patch_len();
    let mut y = vec![T::zero(); rows * g.cout];
    T::gemm(
        rows,
        patch,
        g.cout,
        T::one(),
        &cols,
        patch as isize,
        1,
        kernel,
        g.cout as isize,
        1,
        T::zero(),
        &mut y,
        g.cout as isize,
        1,
    );
    y
}

/// Gradients of [`conv_forward`] given upstream `dy`.
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let rows = g.batch * g.out_voxels();
    let patch = g.patch_len();
    if let Some(dk) = dkernel {
        let cols = im2col(x, g);
        // dK += cols^T * dy
        T::gemm(
            patch,
            rows,
            g.cout,
            T::one(),
            &cols,
            1,
            patch as isize,
            dy,
            g.cout as isize,
            1,
            T::one(),
            dk,
            g.cout as isize,
            1,
        );
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); rows * patch];
        // dcols = dy * K^T
        T::gemm(
            rows,
            g.cout,
            patch,
            T::one(),
            dy,
            g.cout as isize,
            1,
            kernel,
            1,
            g.cout as isize,
            T::zero(),
            &mut dcols,
            patch as isize,
            1,
        );
        col2im(&dcols, g, dx);
    }
}

/// Transposed convolution: the adjoint of the conv described by `g`, mapping
/// `[batch, g.output..., g.cout]` to `[batch, g.input..., g.cin]`.
pub(crate) fn conv_transpose_forward<T: Real>(y: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.batch * g.out_voxels();
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); rows * patch];
    T::gemm(
        rows,
        g.cout,
        patch,
        T::one(),
        y,
        g.cout as isize,
        1,
        kernel,
        1,
        g.cout as isize,
        T::zero(),
        &mut cols,
        patch as isize,
        1,
    );
    let mut out = vec![T::zero(); g.batch * g.in_voxels() * g.cin];
    col2im(&cols, g, &mut out);
    out
}

pub(crate) fn conv_transpose_backward<T: Real>(
    y: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    dy: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let rows = g.batch * g.out_voxels();
    let patch = g.patch_len();
    let dcols = im2col(dout, g);
    if let Some(dy) = dy {
        T::gemm(
            rows,
            patch,
            g.cout,
            T::one(),
            &dcols,
            patch as isize,
            1,
            kernel,
            g.cout as isize,
            1,
            T::one(),
            dy,
            g.cout as isize,
            1,
        );
    }
    if let Some(dk) = dkernel {
        T::gemm(
            patch,
            rows,
            g.cout,
            T::one(),
            &dcols,
            1,
            patch as isize,
            y,
            g.cout as isize,
            1,
            T::one(),
            dk,
            g.cout as isize,
            1,
        );
    }
}
