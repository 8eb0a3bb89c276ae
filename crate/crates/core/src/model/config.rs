use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::graph::Activation;

/// Name reserved for the background generator.
pub const BACKGROUND: &str = "background";

/// One object generator: learnt constant followed by stride-2 3-D upconvs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectGenConfig {
    pub name: String,
    pub z_dim: usize,
    /// Spatial extent of the learnt constant (cubic).
    pub constant_size: usize,
    pub constant_channels: usize,
    /// Output channels of each upconv.
    pub channels: Vec<usize>,
}

impl ObjectGenConfig {
    pub fn grid_size(&self) -> usize {
        self.constant_size << self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.constant_channels)
    }

    /// Channel count at every AdaIN site, constant first.
    pub fn adain_channels(&self) -> Vec<usize> {
        let mut v = vec![self.constant_channels];
        v.extend(&self.channels);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComposerMode {
    #[default]
    Max,
    Sum,
    /// Shared per-voxel linear map over the channel concatenation; fixed arity.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscNorm {
    #[default]
    Instance,
    Spectral,
    None,
}

/// Whole-network architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub activation: Activation,
    pub background: ObjectGenConfig,
    pub foreground: Vec<ObjectGenConfig>,
    /// Foreground objects per training scene, all of the first category.
    pub num_foreground: usize,
    pub composer: ComposerMode,
    /// Channels after the 1x1 projection conv.
    pub projection_channels: usize,
    /// Output channels of the stride-2 decoder upconvs; a final stride-1
    /// upconv maps to RGB.
    pub decoder_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub disc_norm: DiscNorm,
    pub camera: CameraIntrinsics,
    pub camera_distance: f64,
    /// Dataset units per scene-cube unit; translations are divided by it.
    pub scene_extent: f64,
}

fn object(name: &str, z_dim: usize, size: usize, constant: usize, channels: &[usize]) -> ObjectGenConfig {
    ObjectGenConfig {
        name: name.to_string(),
        z_dim,
        constant_size: size,
        constant_channels: constant,
        channels: channels.to_vec(),
    }
}

impl ModelConfig {
    fn full_scale(bg_z: usize, fg_z: usize, fg_name: &str, num_foreground: usize, scene_extent: f64) -> Self {
        ModelConfig {
            image_size: 64,
            activation: Activation::Relu,
            background: object(BACKGROUND, bg_z, 4, 256, &[128, 64]),
            foreground: vec![object(fg_name, fg_z, 4, 512, &[128, 64])],
            num_foreground,
            composer: ComposerMode::Max,
            projection_channels: 64,
            decoder_channels: vec![64, 64],
            disc_channels: vec![64, 128, 256, 512],
            disc_norm: DiscNorm::Instance,
            camera: CameraIntrinsics::default(),
            camera_distance: 1.5,
            scene_extent,
        }
    }

    /// Full-size synthetic architecture with CLEVR latent sizes.
    pub fn clevr(num_foreground: usize) -> Self {
        Self::full_scale(20, 60, "primitive", num_foreground, 10.0)
    }

    pub fn synth_car(num_foreground: usize) -> Self {
        Self::full_scale(30, 90, "car", num_foreground, 12.5)
    }

    pub fn synth_chair(num_foreground: usize) -> Self {
        Self::full_scale(30, 90, "chair", num_foreground, 12.5)
    }

    /// Natural-image architecture: LReLU, wider projection and first decoder layer.
    pub fn real_car() -> Self {
        ModelConfig {
            activation: Activation::Lrelu,
            projection_channels: 256,
            decoder_channels: vec![128, 64],
            ..Self::full_scale(100, 200, "car", 1, 12.5)
        }
    }

    /// Uniformly halved synthetic stack: 32x32 images, 8^3 x 32 object features.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            activation: Activation::Relu,
            background: object(BACKGROUND, 20, 2, 128, &[64, 32]),
            foreground: vec![object("sphere", 60, 2, 256, &[64, 32])],
            num_foreground: 1,
            composer: ComposerMode::Max,
            projection_channels: 32,
            decoder_channels: vec![32, 32],
            disc_channels: vec![32, 64, 128, 256],
            disc_norm: DiscNorm::Instance,
            camera: CameraIntrinsics::default(),
            camera_distance: 1.5,
            scene_extent: 1.0,
        }
    }

    /// Very small stack for unit tests and finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            activation: Activation::Relu,
            background: object(BACKGROUND, 3, 2, 4, &[3]),
            foreground: vec![object("sphere", 4, 2, 6, &[3])],
            num_foreground: 1,
            composer: ComposerMode::Max,
            projection_channels: 4,
            decoder_channels: vec![4, 3],
            disc_channels: vec![3, 4],
            disc_norm: DiscNorm::Instance,
            camera: CameraIntrinsics::default(),
            camera_distance: 1.5,
            scene_extent: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "desk" => Self::desk(),
            "tiny" => Self::tiny(),
            "clevr" => Self::clevr(2),
            "synth-car" => Self::synth_car(1),
            "synth-chair" => Self::synth_chair(1),
            "real-car" => Self::real_car(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (desk, tiny, clevr, synth-car, synth-chair, real-car)"
                )))
            }
        })
    }

    /// Extent of object, scene and camera feature grids.
    pub fn grid_size(&self) -> usize {
        self.background.grid_size()
    }

    pub fn feature_channels(&self) -> usize {
        self.background.out_channels()
    }

    pub fn category(&self, name: &str) -> Result<&ObjectGenConfig> {
        if name == BACKGROUND {
            return Ok(&self.background);
        }
        self.foreground
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown category {name:?}")))
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.foreground.iter().position(|c| c.name == name)
    }

    /// Width of the decoder style input: background z plus one slot per category.
    pub fn decoder_z_dim(&self) -> usize {
        self.background.z_dim + self.foreground.iter().map(|c| c.z_dim).sum::<usize>()
    }

    /// Spatial extent of each discriminator layer output.
    pub fn disc_extents(&self) -> Vec<usize> {
        (1..=self.disc_channels.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.foreground.is_empty() {
            return bad("at least one foreground category is required".into());
        }
        let mut names = vec![self.background.name.as_str()];
        if self.background.name != BACKGROUND {
            return bad(format!("background generator must be named {BACKGROUND:?}"));
        }
        for gen in std::iter::once(&self.background).chain(&self.foreground) {
            if gen.z_dim == 0 || gen.constant_size == 0 || gen.constant_channels == 0 || gen.channels.contains(&0) {
                return bad(format!("generator {:?}: dimensions must be positive", gen.name));
            }
            if gen.grid_size() != self.grid_size() || gen.out_channels() != self.feature_channels() {
                return bad(format!(
                    "generator {:?}: produces {}^3 x {} features, background produces {}^3 x {}",
                    gen.name,
                    gen.grid_size(),
                    gen.out_channels(),
                    self.grid_size(),
                    self.feature_channels()
                ));
            }
        }
        for gen in &self.foreground {
            if names.contains(&gen.name.as_str()) {
                return bad(format!("duplicate category name {:?}", gen.name));
            }
            names.push(&gen.name);
        }
        if self.grid_size() < 2 {
            return bad("feature grids need at least 2 voxels per axis".into());
        }
        if self.grid_size() << self.decoder_channels.len() != self.image_size {
            return bad(format!(
                "grid {} upsampled by {} decoder layers gives {}, expected image_size {}",
                self.grid_size(),
                self.decoder_channels.len(),
                self.grid_size() << self.decoder_channels.len(),
                self.image_size
            ));
        }
        if self.projection_channels == 0 || self.decoder_channels.contains(&0) {
            return bad("projection and decoder channels must be positive".into());
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return bad("discriminator needs at least one layer with positive channels".into());
        }
        if self.image_size >> self.disc_channels.len() == 0
            || (self.image_size >> self.disc_channels.len()) << self.disc_channels.len() != self.image_size
        {
            return bad(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size,
                self.disc_channels.len()
            ));
        }
        if !(self.scene_extent > 0.0) {
            return bad("scene_extent must be positive".into());
        }
        if !(self.camera_distance > 0.0) {
            return bad("camera_distance must be positive".into());
        }
        self.camera.validate()?;
        if !matches!(self.activation, Activation::Relu | Activation::Lrelu) {
            return bad("activation must be relu or lrelu".into());
        }
        Ok(())
    }
}
