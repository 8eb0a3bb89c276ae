//! Pose ranges and the latent/pose samplers used for training and datasets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Pose};
use crate::tensor::Tensor;

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::Config(format!("{what}: invalid interval [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if self.hi == self.lo {
            self.lo
        } else {
            (self.lo + u * (self.hi - self.lo)).min(self.hi)
        }
    }
}

/// Uniform pose distribution for foreground objects plus camera ranges.
/// Translations are in dataset units; azimuths in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRanges {
    /// Union of azimuth intervals, sampled uniformly over its total length.
    pub azimuth: Vec<Interval>,
    pub scale: Interval,
    pub horizontal: Interval,
    pub depth: Interval,
    pub camera_elevation: Interval,
    #[serde(default = "zero_interval")]
    pub camera_azimuth: Interval,
}

fn zero_interval() -> Interval {
    Interval::point(0.0)
}

impl PoseRanges {
    fn table(scale: Interval, horizontal: Interval, depth: Interval, elevation: Interval) -> Self {
        PoseRanges {
            azimuth: vec![Interval::new(0.0, 359.0)],
            scale,
            horizontal,
            depth,
            camera_elevation: elevation,
            camera_azimuth: zero_interval(),
        }
    }

    pub fn synth_car() -> Self {
        Self::table(
            Interval::new(0.5, 0.6),
            Interval::new(-5.0, 5.0),
            Interval::new(-5.0, 5.0),
            Interval::point(45.0),
        )
    }

    pub fn synth_chair() -> Self {
        Self::synth_car()
    }

    pub fn clevr() -> Self {
        Self::table(
            Interval::new(0.5, 0.6),
            Interval::new(-4.0, 4.0),
            Interval::new(-4.0, 4.0),
            Interval::point(45.0),
        )
    }

    pub fn real_car() -> Self {
        Self::table(
            Interval::new(0.5, 0.8),
            Interval::new(-3.0, 4.0),
            Interval::new(-5.0, 6.0),
            Interval::new(0.0, 35.0),
        )
    }

    /// Built-in toy scenes, translations already in scene-cube units.
    pub fn toy() -> Self {
        Self::table(
            Interval::new(0.5, 0.6),
            Interval::new(-0.4, 0.4),
            Interval::new(-0.4, 0.4),
            Interval::point(45.0),
        )
    }

    /// Only front/left/back/right views within +-15 degrees.
    pub fn imbalanced(mut self) -> Self {
        self.azimuth = (0..4)
            .map(|k| {
                let c = 90.0 * k as f64;
                Interval::new(c - 15.0, c + 15.0)
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth.is_empty() {
            return Err(Error::Config("pose.azimuth: at least one interval required".into()));
        }
        for a in &self.azimuth {
            a.validate("pose.azimuth")?;
        }
        self.scale.validate("pose.scale")?;
        if !(self.scale.lo > 0.0 && self.scale.hi <= 1.0) {
            return Err(Error::Config(format!(
                "pose.scale: foreground scales must lie in (0, 1], got [{}, {}]",
                self.scale.lo, self.scale.hi
            )));
        }
        self.horizontal.validate("pose.horizontal")?;
        self.depth.validate("pose.depth")?;
        self.camera_elevation.validate("pose.camera_elevation")?;
        self.camera_azimuth.validate("pose.camera_azimuth")?;
        if self.camera_elevation.lo < -89.0 || self.camera_elevation.hi > 89.0 {
            return Err(Error::Config("pose.camera_elevation: must lie within [-89, 89]".into()));
        }
        Ok(())
    }

    /// Azimuth, wrapped into `[0, 360)`, uniform over the interval union.
    pub fn sample_azimuth<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.azimuth.iter().map(|i| i.width()).sum();
        let raw = if total == 0.0 {
            let k = rng.random_range(0..self.azimuth.len());
            self.azimuth[k].lo
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = self.azimuth[self.azimuth.len() - 1].hi;
            for i in &self.azimuth {
                if u <= i.width() {
                    pick = i.lo + u;
                    break;
                }
                u -= i.width();
            }
            pick
        };
        raw.rem_euclid(360.0)
    }

    /// True when the wrapped azimuth falls inside the interval union.
    pub fn azimuth_allowed(&self, az: f64) -> bool {
        let a = az.rem_euclid(360.0);
        self.azimuth.iter().any(|i| {
            (-1..=1).any(|k| i.contains(a + 360.0 * k as f64))
        })
    }
}

/// Foreground pose: scale, azimuth and ground-plane translation drawn from `ranges`.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, ranges: &PoseRanges) -> Pose {
    let scale = ranges.scale.sample(rng);
    let azimuth_deg = ranges.sample_azimuth(rng);
    let tx = ranges.horizontal.sample(rng);
    let tz = ranges.depth.sample(rng);
    Pose {
        scale,
        azimuth_deg,
        elevation_deg: 0.0,
        translation: [tx, 0.0, tz],
    }
}

pub fn sample_camera<R: Rng + ?Sized>(rng: &mut R, ranges: &PoseRanges, distance: f64) -> CameraPose {
    CameraPose {
        azimuth_deg: ranges.camera_azimuth.sample(rng),
        elevation_deg: ranges.camera_elevation.sample(rng),
        distance,
    }
}

/// `[n, dim]` standard normal latents.
pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Tensor<f32> {
    let data = (0..n * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    Tensor::new(&[n, dim], data).expect("positive dims")
}

/// Latent vector expanded from a seed, as used for reproducible scene specs.
pub fn latent_from_seed(seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latents(&mut rng, 1, dim).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_interval_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i = Interval::point(0.3);
        for _ in 0..10 {
            assert_eq!(i.sample(&mut rng), 0.3);
        }
    }

    #[test]
    fn table_presets() {
        let r = PoseRanges::synth_car();
        assert_eq!(r.scale, Interval::new(0.5, 0.6));
        assert_eq!(r.horizontal, Interval::new(-5.0, 5.0));
        assert_eq!(r.camera_elevation, Interval::point(45.0));
        let r = PoseRanges::real_car();
        assert_eq!(r.depth, Interval::new(-5.0, 6.0));
        assert_eq!(r.scale, Interval::new(0.5, 0.8));
        for r in [PoseRanges::synth_car(), PoseRanges::clevr(), PoseRanges::real_car(), PoseRanges::toy()] {
            r.validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut r = PoseRanges::toy();
        r.scale = Interval::new(0.5, 1.2);
        assert!(r.validate().is_err());
        let mut r = PoseRanges::toy();
        r.azimuth.clear();
        assert!(r.validate().is_err());
        let mut r = PoseRanges::toy();
        r.depth = Interval::new(1.0, -1.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn imbalanced_sectors() {
        let r = PoseRanges::synth_car().imbalanced();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [0usize; 4];
        for _ in 0..20_000 {
            let a = r.sample_azimuth(&mut rng);
            assert!((0.0..360.0).contains(&a));
            assert!(r.azimuth_allowed(a));
            // gaps are (15, 75), (105, 165), (195, 255), (285, 345)
            let in_gap = (0..4).any(|k| {
                let lo = 15.0 + 90.0 * k as f64;
                a > lo && a < lo + 60.0
            });
            assert!(!in_gap, "{a}");
            seen[(((a + 15.0) / 90.0) as usize) % 4] += 1;
        }
        assert!(seen.iter().all(|&c| c > 4000), "{seen:?}");
        assert!(!r.azimuth_allowed(45.0));
        assert!(!r.azimuth_allowed(130.0));
        assert!(r.azimuth_allowed(350.0));
    }

    #[test]
    fn latents_reproducible() {
        let a = latent_from_seed(5, 20);
        let b = latent_from_seed(5, 20);
        assert_eq!(a, b);
        assert_ne!(a, latent_from_seed(6, 20));
    }
}
