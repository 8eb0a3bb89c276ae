//! Network definitions: configuration, generator and discriminator.

pub mod config;
pub mod discriminator;
pub mod generator;

pub use config::{ComposerMode, DiscNorm, ModelConfig, ObjectGenConfig, BACKGROUND};
pub use discriminator::{discriminate, init_discriminator, style_logit, style_logits, style_stats, DiscOutput};
pub use generator::{
    generate, init_generator, render_batch, render_spec, CameraSpec, FeatureEdit, GenOutput, Latent, ObjectSlot,
    ObjectSpec, SceneBatch, SceneSpec,
};
