//! Unbiased kernel MMD between image feature sets.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{discriminate, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorId {
    /// Flattened input of the discriminator's final linear layer.
    #[default]
    Discriminator,
    /// Fixed Gaussian projection of the pixels.
    RandomProjection,
    RawPixels,
}

impl std::str::FromStr for ExtractorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminator" => Ok(ExtractorId::Discriminator),
            "random-projection" | "random_projection" => Ok(ExtractorId::RandomProjection),
            "raw-pixels" | "raw_pixels" => Ok(ExtractorId::RawPixels),
            other => Err(Error::Config(format!(
                "unknown extractor {other:?} (discriminator, random-projection, raw-pixels)"
            ))),
        }
    }
}

/// `n x d` row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor: ExtractorId,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor: ExtractorId) -> Result<Self> {
        if n < 2 || d == 0 || data.len() != n * d {
            return Err(Error::invalid(
                "FeatureSet",
                format!("need n >= 2 rows of d > 0 features, got n={n}, d={d}, {} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("FeatureSet", "features must be finite"));
        }
        Ok(FeatureSet { n, d, data, extractor })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn select(&self, rows: &[usize]) -> FeatureSet {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        FeatureSet {
            n: rows.len(),
            d: self.d,
            data,
            extractor: self.extractor,
        }
    }

    /// Rows sorted lexicographically, so subset draws do not depend on the
    /// order images were supplied in.
    pub fn canonical(&self) -> FeatureSet {
        let mut rows: Vec<usize> = (0..self.n).collect();
        rows.sort_by(|&a, &b| {
            self.row(a)
                .iter()
                .zip(self.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        self.select(&rows)
    }

    pub fn scaled(&self, c: f64) -> FeatureSet {
        FeatureSet {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(
            "poly_kernel",
            format!("dims {} and {}", x.len(), y.len()),
        ));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / x.len() as f64 + 1.0).powi(3))
}

/// Kernel matrix between the rows of `x` and `y`.
fn gram(x: &FeatureSet, y: &FeatureSet) -> Vec<f64> {
    let mut c = vec![0.0; x.n * y.n];
    f64::gemm(
        x.n,
        x.d,
        y.n,
        1.0,
        &x.data,
        x.d as isize,
        1,
        &y.data,
        1,
        y.d as isize,
        0.0,
        &mut c,
        y.n as isize,
        1,
    );
    let inv_d = 1.0 / x.d as f64;
    c.iter_mut().for_each(|v| *v = (*v * inv_d + 1.0).powi(3));
    c
}

fn off_diagonal_sum(k: &[f64], n: usize) -> f64 {
    let total: f64 = k.iter().sum();
    let diag: f64 = (0..n).map(|i| k[i * n + i]).sum();
    total - diag
}

/// Unbiased estimate of squared MMD: within-set means exclude the diagonal.
pub fn mmd2_unbiased(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    if x.n < 2 || y.n < 2 {
        return Err(Error::invalid("mmd2_unbiased", "each set needs at least 2 rows"));
    }
    if x.d != y.d {
        return Err(Error::shape("mmd2_unbiased", format!("feature dims {} and {}", x.d, y.d)));
    }
    let (m, n) = (x.n as f64, y.n as f64);
    let kxx = off_diagonal_sum(&gram(x, x), x.n) / (m * (m - 1.0));
    let kyy = off_diagonal_sum(&gram(y, y), y.n) / (n * (n - 1.0));
    let kxy = gram(x, y).iter().sum::<f64>() / (m * n);
    Ok(kxx + kyy - 2.0 * kxy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidReport {
    pub mean: f64,
    pub std: f64,
    pub subset_size: usize,
    pub subsets: usize,
    pub extractor: ExtractorId,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidOptions {
    pub subsets: usize,
    /// Defaults to `min(1000, n)` over both sets.
    pub subset_size: Option<usize>,
    pub seed: u64,
}

impl Default for KidOptions {
    fn default() -> Self {
        KidOptions {
            subsets: 100,
            subset_size: None,
            seed: 0,
        }
    }
}

/// Mean and sample deviation of the unbiased MMD over random subsets.
/// Subsets index the canonically ordered sets and are drawn up front, so the
/// result depends on neither image order nor evaluation order.
pub fn kid(real: &FeatureSet, fake: &FeatureSet, opts: &KidOptions) -> Result<KidReport> {
    if real.extractor != fake.extractor {
        return Err(Error::invalid("kid", "feature sets come from different extractors"));
    }
    if opts.subsets == 0 {
        return Err(Error::invalid("kid", "subsets must be positive"));
    }
    let size = opts.subset_size.unwrap_or_else(|| 1000.min(real.n.min(fake.n)));
    if size < 2 || size > real.n || size > fake.n {
        return Err(Error::invalid(
            "kid",
            format!("subset size {size} needs 2..={} images per set", real.n.min(fake.n)),
        ));
    }
    let (real, fake) = (&real.canonical(), &fake.canonical());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draws: Vec<(Vec<usize>, Vec<usize>)> = (0..opts.subsets)
        .map(|_| {
            let a = sample(&mut rng, real.n, size).into_vec();
            let b = sample(&mut rng, fake.n, size).into_vec();
            (a, b)
        })
        .collect();
    let values: Vec<f64> = draws
        .par_iter()
        .map(|(a, b)| mmd2_unbiased(&real.select(a), &fake.select(b)))
        .collect::<Result<_>>()?;
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(KidReport {
        mean,
        std,
        subset_size: size,
        subsets: opts.subsets,
        extractor: real.extractor,
        n_real: real.n,
        n_fake: fake.n,
    })
}

/// Feature extractor over `[N, S, S, 3]` images in `[-1, 1]`.
pub enum Extractor<'a> {
    Discriminator { model: &'a ModelConfig, params: &'a ParamStore },
    RandomProjection { dim: usize, seed: u64 },
    RawPixels,
}

pub const PROJECTION_DIM: usize = 256;
const CHUNK: usize = 64;

impl Extractor<'_> {
    pub fn id(&self) -> ExtractorId {
        match self {
            Extractor::Discriminator { .. } => ExtractorId::Discriminator,
            Extractor::RandomProjection { .. } => ExtractorId::RandomProjection,
            Extractor::RawPixels => ExtractorId::RawPixels,
        }
    }

    pub fn extract(&self, images: &Tensor<f32>) -> Result<FeatureSet> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("extract", format!("images {s:?}")));
        }
        let n = s[0];
        let pixels = s[1] * s[2] * 3;
        let (d, data) = match self {
            Extractor::RawPixels => (pixels, images.data().iter().map(|&v| v as f64).collect()),
            Extractor::RandomProjection { dim, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let w = Tensor::<f64>::randn(&[pixels, *dim], 1.0 / (pixels as f64).sqrt(), &mut rng);
                let x: Vec<f64> = images.data().iter().map(|&v| v as f64).collect();
                (*dim, crate::tensor::matmul(n, pixels, *dim, &x, w.data()))
            }
            Extractor::Discriminator { model, params } => {
                let mut data = Vec::new();
                let mut d = 0;
                for start in (0..n).step_by(CHUNK) {
                    let len = CHUNK.min(n - start);
                    let chunk = Tensor::new(
                        &[len, s[1], s[2], 3],
                        images.data()[start * pixels..(start + len) * pixels].to_vec(),
                    )?;
                    let mut g = Graph::<f32>::new();
                    let b = params.bind(&mut g, false);
                    let x = g.constant(chunk);
                    let out = discriminate(&mut g, &b, model, x)?;
                    let last = *out.features.last().expect("at least one layer");
                    let v = g.value(last);
                    d = v.len() / len;
                    data.extend(v.data().iter().map(|&f| f as f64));
                }
                (d, data)
            }
        };
        FeatureSet::new(n, d, data, self.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
        let data = (0..n * d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v + shift
            })
            .collect();
        FeatureSet::new(n, d, data, ExtractorId::RawPixels).unwrap()
    }

    fn brute_force(x: &FeatureSet, y: &FeatureSet) -> f64 {
        let k = |a: &[f64], b: &[f64]| poly_kernel(a, b).unwrap();
        let (m, n) = (x.n, y.n);
        let mut sxx = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sxx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut syy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    syy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut sxy = 0.0;
        for i in 0..m {
            for j in 0..n {
                sxy += k(x.row(i), y.row(j));
            }
        }
        sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64 - 2.0 * sxy / (m * n) as f64
    }

    #[test]
    fn kernel_values() {
        assert_eq!(poly_kernel(&[0.0; 4], &[0.0; 4]).unwrap(), 1.0);
        let x = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(poly_kernel(&x, &x).unwrap(), 8.0);
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.4, -0.7]);
        let dot = 0.3 * 1.5 + -1.2 * 0.4 + 2.0 * -0.7;
        let want = (dot / 3.0 + 1.0f64).powi(3);
        assert!((poly_kernel(&a, &b).unwrap() - want).abs() < 1e-15);
        assert!(poly_kernel(&a, &[1.0]).is_err());
    }

    #[test]
    fn two_by_two_double_sum() {
        let x = FeatureSet::new(2, 3, vec![0.2, -0.5, 1.0, 1.3, 0.1, -0.4], ExtractorId::RawPixels).unwrap();
        let y = FeatureSet::new(2, 3, vec![-0.7, 0.9, 0.3, 0.5, 0.5, 2.0], ExtractorId::RawPixels).unwrap();
        let k = |a: &[f64], b: &[f64]| poly_kernel(a, b).unwrap();
        let by_hand = (k(x.row(0), x.row(1)) + k(x.row(1), x.row(0))) / 2.0
            + (k(y.row(0), y.row(1)) + k(y.row(1), y.row(0))) / 2.0
            - 2.0 * (k(x.row(0), y.row(0)) + k(x.row(0), y.row(1)) + k(x.row(1), y.row(0)) + k(x.row(1), y.row(1)))
                / 4.0;
        assert!((mmd2_unbiased(&x, &y).unwrap() - by_hand).abs() < 1e-10);
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(7, 5, 0.0, &mut rng);
        let y = gaussian(9, 5, 0.4, &mut rng);
        assert!((mmd2_unbiased(&x, &y).unwrap() - brute_force(&x, &y)).abs() < 1e-10);
    }

    #[test]
    fn point_mass_gives_zero() {
        let x = FeatureSet::new(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0], ExtractorId::RawPixels).unwrap();
        assert_eq!(mmd2_unbiased(&x, &x.select(&[0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(12, 4, 0.0, &mut rng);
        let y = gaussian(10, 4, 0.3, &mut rng);
        let a = mmd2_unbiased(&x, &y).unwrap();
        assert!((a - mmd2_unbiased(&y, &x).unwrap()).abs() < 1e-12);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.reverse();
        assert!((a - mmd2_unbiased(&x.select(&perm), &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unbiased_under_identical_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vals: Vec<f64> = (0..1000)
            .map(|_| mmd2_unbiased(&gaussian(8, 3, 0.0, &mut rng), &gaussian(8, 3, 0.0, &mut rng)).unwrap())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, stderr {}", sd / n.sqrt());
    }

    #[test]
    fn kid_subsets_match_oracle_and_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gaussian(30, 4, 0.0, &mut rng);
        let y = gaussian(25, 4, 0.5, &mut rng);
        let opts = KidOptions {
            subsets: 5,
            subset_size: Some(10),
            seed: 2,
        };
        let r = kid(&x, &y, &opts).unwrap();
        assert_eq!(r, kid(&x, &y, &opts).unwrap());
        let (cx, cy) = (x.canonical(), y.canonical());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..5)
            .map(|_| {
                let a = sample(&mut rng, 30, 10).into_vec();
                let b = sample(&mut rng, 25, 10).into_vec();
                brute_force(&cx.select(&a), &cy.select(&b))
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!((r.mean - mean).abs() < 1e-10);
        assert!(r.std >= 0.0);
        assert!(r.mean > 0.0);
        assert!(kid(&x, &y, &KidOptions { subset_size: Some(26), ..opts }).is_err());
        assert_eq!(kid(&x, &y, &KidOptions::default()).unwrap().subset_size, 25);
    }

    #[test]
    fn feature_scaling_is_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = gaussian(20, 3, 0.0, &mut rng);
        let y = gaussian(20, 3, 1.0, &mut rng);
        let opts = KidOptions {
            subsets: 4,
            subset_size: Some(10),
            seed: 1,
        };
        let at = |c: f64| kid(&x.scaled(c), &y.scaled(c), &opts).unwrap().mean;
        let (a, b, c) = (at(1.0), at(1.0 + 1e-6), at(2.0));
        assert_eq!(a, at(1.0));
        assert!((a - b).abs() < 1e-3 * a.abs().max(1.0));
        assert!((a - c).abs() > 1e-3);
    }

    #[test]
    fn same_distribution_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = gaussian(200, 3, 0.0, &mut rng);
        let y = gaussian(200, 3, 0.0, &mut rng);
        let r = kid(&x, &y, &KidOptions { subsets: 50, subset_size: Some(50), seed: 4 }).unwrap();
        assert!(r.mean.abs() < 2.0 * r.std, "{r:?}");
    }

    #[test]
    fn extractors_have_expected_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..3 * 16 * 16 * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let imgs = Tensor::new(&[3, 16, 16, 3], data).unwrap();
        assert_eq!(Extractor::RawPixels.extract(&imgs).unwrap().d, 768);
        let p = Extractor::RandomProjection { dim: 32, seed: 1 }.extract(&imgs).unwrap();
        assert_eq!((p.n, p.d), (3, 32));
        assert_eq!(p, Extractor::RandomProjection { dim: 32, seed: 1 }.extract(&imgs).unwrap());
        let model = ModelConfig::tiny();
        let params = crate::model::init_discriminator(&model, &mut rng).unwrap();
        let f = Extractor::Discriminator { model: &model, params: &params }.extract(&imgs).unwrap();
        assert_eq!(f.d, 4 * 4 * 4);
        assert_eq!(f.extractor, ExtractorId::Discriminator);
        assert!("bogus".parse::<ExtractorId>().is_err());
    }
}
