//! Image discriminator and per-layer style discriminators.

use rand::Rng;

use super::config::{DiscNorm, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Padding, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

const POWER_ITERS: usize = 20;

pub fn init_discriminator(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let mut cin = 3;
    for (i, &cout) in cfg.disc_channels.iter().enumerate() {
        p.weight(&format!("disc/conv{i}/k"), &[5, 5, cin, cout], rng)?;
        if cfg.disc_norm != DiscNorm::Instance {
            p.bias(&format!("disc/conv{i}/b"), cout)?;
        }
        cin = cout;
    }
    let last = *cfg.disc_extents().last().expect("validated");
    p.weight("disc/fc/w", &[last * last * cin, 1], rng)?;
    p.bias("disc/fc/b", 1)?;
    for (l, &c) in cfg.disc_channels.iter().enumerate() {
        p.weight(&format!("disc/style{l}/w1"), &[2 * c, c], rng)?;
        p.bias(&format!("disc/style{l}/b1"), c)?;
        p.weight(&format!("disc/style{l}/w2"), &[c, 1], rng)?;
        p.bias(&format!("disc/style{l}/b2"), 1)?;
    }
    Ok(p)
}

/// Largest singular value of `w` viewed as `[rows, cols]`, by power iteration
/// from a fixed start vector.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERS {
        let mut u = vec![0.0; rows];
        for r in 0..rows {
            u[r] = (0..cols).map(|c| w[r * cols + c] * v[c]).sum();
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= un);
        let mut nv = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                nv[c] += w[r * cols + c] * u[r];
            }
        }
        sigma = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            return 0.0;
        }
        v = nv.into_iter().map(|x| x / sigma).collect();
    }
    sigma
}

/// `w / sigma(w)` with the norm treated as a constant.
fn normalized_weight<T: Real>(g: &mut Graph<T>, w: Var) -> Var {
    let s = g.shape(w).to_vec();
    let cols = *s.last().unwrap();
    let rows = g.value(w).len() / cols;
    let data: Vec<f64> = g.value(w).data().iter().map(|v| v.as_f64()).collect();
    let sigma = spectral_norm(&data, rows, cols);
    if sigma > 0.0 {
        g.scale(w, T::from_f64(1.0 / sigma))
    } else {
        w
    }
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[N, 1]` pre-sigmoid logits.
    pub logit: Var,
    /// Post-activation output of every conv layer.
    pub features: Vec<Var>,
}

/// Image discriminator over `[N, S, S, 3]` images.
pub fn discriminate<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, images: Var) -> Result<DiscOutput> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
        return Err(Error::shape(
            "discriminate",
            format!(
                "images {s:?}, expected [N, {}, {}, 3]",
                cfg.image_size, cfg.image_size
            ),
        ));
    }
    let n = s[0];
    let mut x = images;
    let mut features = Vec::with_capacity(cfg.disc_channels.len());
    for i in 0..cfg.disc_channels.len() {
        let mut k = b.get(&format!("disc/conv{i}/k"))?;
        if cfg.disc_norm == DiscNorm::Spectral {
            k = normalized_weight(g, k);
        }
        x = g.conv2d(x, k, 2, Padding::Same)?;
        x = match cfg.disc_norm {
            DiscNorm::Instance => g.instance_norm(x, None, None)?,
            DiscNorm::Spectral | DiscNorm::None => g.add_bias(x, b.get(&format!("disc/conv{i}/b"))?)?,
        };
        x = g.activation(x, Activation::Lrelu);
        features.push(x);
    }
    let flat_len = g.value(x).len() / n;
    let flat = g.reshape(x, &[n, flat_len])?;
    let mut w = b.get("disc/fc/w")?;
    if cfg.disc_norm == DiscNorm::Spectral {
        w = normalized_weight(g, w);
    }
    let logit = g.linear(flat, w, Some(b.get("disc/fc/b")?))?;
    Ok(DiscOutput { logit, features })
}

/// Channel mean and deviation pooled over batch and space: `[1, 2C]`.
pub fn style_stats<T: Real>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    g.moments(features, false)
}

/// Style discriminator `l` applied to `[1, 2C]` statistics; returns `[1, 1]`.
pub fn style_logit<T: Real>(g: &mut Graph<T>, b: &Bound, layer: usize, stats: Var) -> Result<Var> {
    let w1 = b.get(&format!("disc/style{layer}/w1"))?;
    let want = g.shape(w1)[0];
    let got = g.shape(stats).to_vec();
    if got.len() != 2 || got[1] != want {
        return Err(Error::shape(
            "style_logit",
            format!("layer {layer} expects [1, {want}] statistics, got {got:?}"),
        ));
    }
    let h = g.linear(stats, w1, Some(b.get(&format!("disc/style{layer}/b1"))?))?;
    let h = g.activation(h, Activation::Lrelu);
    g.linear(h, b.get(&format!("disc/style{layer}/w2"))?, Some(b.get(&format!("disc/style{layer}/b2"))?))
}

/// One style logit per discriminator layer.
pub fn style_logits<T: Real>(g: &mut Graph<T>, b: &Bound, features: &[Var]) -> Result<Vec<Var>> {
    features
        .iter()
        .enumerate()
        .map(|(l, &f)| {
            let stats = style_stats(g, f)?;
            style_logit(g, b, l, stats)
        })
        .collect()
}
