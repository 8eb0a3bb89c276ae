use crate::tensor::Real;

/// Per `(instance, channel)` standardization of `[n, spatial, c]` data.
/// Returns the normalized values and `1 / sqrt(var + eps)` per `(instance, channel)`.
pub(crate) fn normalize<T: Real>(x: &[T], n: usize, spatial: usize, c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * c];
    let s = T::from_f64(spatial as f64);
    for i in 0..n {
        let block = &x[i * spatial * c..(i + 1) * spatial * c];
        let mut mean = vec![T::zero(); c];
        for row in block.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / s;
        }
        let mut var = vec![T::zero(); c];
        for row in block.chunks_exact(c) {
            for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        for ch in 0..c {
            inv_std[i * c + ch] = T::one() / (var[ch] / s + eps).sqrt();
        }
        let dst = &mut out[i * spatial * c..(i + 1) * spatial * c];
        for (drow, row) in dst.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
            for ch in 0..c {
                drow[ch] = (row[ch] - mean[ch]) * inv_std[i * c + ch];
            }
        }
    }
    (out, inv_std)
}

pub(crate) fn normalize_backward<T: Real>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    n: usize,
    spatial: usize,
    c: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let s = T::from_f64(spatial as f64);
    for i in 0..n {
        let range = i * spatial * c..(i + 1) * spatial * c;
        let (dh, xh) = (&dxhat[range.clone()], &xhat[range.clone()]);
        let mut sum_d = vec![T::zero(); c];
        let mut sum_dx = vec![T::zero(); c];
        for (drow, xrow) in dh.chunks_exact(c).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                sum_d[ch] += drow[ch];
                sum_dx[ch] += drow[ch] * xrow[ch];
            }
        }
        let out = &mut dx[range];
        for ((orow, drow), xrow) in out.chunks_exact_mut(c).zip(dh.chunks_exact(c)).zip(xh.chunks_exact(c)) {
            for ch in 0..c {
                let k = inv_std[i * c + ch] / s;
                orow[ch] = k * (s * drow[ch] - sum_d[ch] - xrow[ch] * sum_dx[ch]);
            }
        }
    }
    dx
}

/// Channel mean and `sqrt(biased var + eps)` over `per_group` rows of `c` channels.
pub(crate) fn channel_moments<T: Real>(
    x: &[T],
    groups: usize,
    per_group: usize,
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); groups * c];
    let mut sigma = vec![T::zero(); groups * c];
    let m = T::from_f64(per_group as f64);
    for gi in 0..groups {
        let block = &x[gi * per_group * c..(gi + 1) * per_group * c];
        let mu = &mut mean[gi * c..(gi + 1) * c];
        for row in block.chunks_exact(c) {
            for (a, &v) in mu.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in mu.iter_mut() {
            *a = *a / m;
        }
        let sg = &mut sigma[gi * c..(gi + 1) * c];
        for row in block.chunks_exact(c) {
            for ((a, &v), &u) in sg.iter_mut().zip(row).zip(mu.iter()) {
                let d = v - u;
                *a += d * d;
            }
        }
        for a in sg.iter_mut() {
            *a = (*a / m + eps).sqrt();
        }
    }
    (mean, sigma)
}

pub(crate) fn apply_taps<T: Real>(src: &[T], index: &[[u32; 8]], weight: &[[T; 8]], c: usize, out: &mut [T]) {
    for (v, (idx, w)) in index.iter().zip(weight).enumerate() {
        let dst = &mut out[v * c..(v + 1) * c];
        for k in 0..8 {
            if w[k] == T::zero() {
                continue;
            }
            let s = idx[k] as usize * c;
            for (o, &x) in dst.iter_mut().zip(&src[s..s + c]) {
                *o += w[k] * x;
            }
        }
    }
}

pub(crate) fn scatter_taps<T: Real>(g: &[T], index: &[[u32; 8]], weight: &[[T; 8]], c: usize, d: &mut [T]) {
    for (v, (idx, w)) in index.iter().zip(weight).enumerate() {
        let src = &g[v * c..(v + 1) * c];
        for k in 0..8 {
            if w[k] == T::zero() {
                continue;
            }
            let s = idx[k] as usize * c;
            for (o, &x) in d[s..s + c].iter_mut().zip(src) {
                *o += w[k] * x;
            }
        }
    }
}
