//! Request bodies and their validation against the loaded model.

use blockgan::geometry::Pose;
use blockgan::model::generator::CameraSpec;
use blockgan::model::{ComposerMode, Latent, ModelConfig, ObjectSpec, SceneSpec, BACKGROUND};
use serde::{Deserialize, Serialize};

/// Upper bound on objects per scene, background included.
pub const MAX_OBJECTS: usize = 16;
pub const MAX_INTERPOLATION_STEPS: usize = 32;
pub const MAX_ELEVATION_DEG: f64 = 89.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRequest {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub azimuth_deg: f64,
    #[serde(default)]
    pub tx: f64,
    #[serde(default)]
    pub ty: f64,
    #[serde(default)]
    pub tz: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for PoseRequest {
    fn default() -> Self {
        PoseRequest {
            scale: 1.0,
            azimuth_deg: 0.0,
            tx: 0.0,
            ty: 0.0,
            tz: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRequest {
    pub category: String,
    pub z: Latent,
    #[serde(default)]
    pub pose: PoseRequest,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRequest {
    #[serde(default)]
    pub azimuth_deg: f64,
    #[serde(default)]
    pub elevation_deg: f64,
    pub focal_mm: Option<f64>,
    pub sensor_mm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageEncoding {
    #[default]
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub objects: Vec<ObjectRequest>,
    #[serde(default)]
    pub camera: CameraRequest,
    pub composer: Option<ComposerMode>,
    #[serde(default)]
    pub output: ImageEncoding,
}

/// Interpolates the latent of one object between two endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub scene: GenerateRequest,
    /// Index into `scene.objects`; the background by default.
    #[serde(default)]
    pub object: usize,
    pub from: Latent,
    pub to: Latent,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn push(errors: &mut Vec<FieldError>, field: impl Into<String>, message: impl Into<String>) {
    errors.push(FieldError {
        field: field.into(),
        message: message.into(),
    });
}

fn check_latent(errors: &mut Vec<FieldError>, field: &str, z: &Latent, dim: usize) {
    if let Latent::Vector(v) = z {
        if v.len() != dim {
            push(errors, field, format!("expected {dim} entries, got {}", v.len()));
        } else if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            push(errors, format!("{field}[{i}]"), "must be finite");
        }
    }
}

fn check_finite(errors: &mut Vec<FieldError>, field: String, v: f64) -> bool {
    if v.is_finite() {
        true
    } else {
        push(errors, field, "must be finite");
        false
    }
}

impl GenerateRequest {
    /// Every problem with the request, by field path.
    pub fn validate(&self, cfg: &ModelConfig) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            push(&mut errors, "objects", format!("expected 1 to {MAX_OBJECTS} objects, got {n}"));
        }
        let backgrounds = self.objects.iter().filter(|o| o.category == BACKGROUND).count();
        if backgrounds != 1 {
            push(&mut errors, "objects", format!("exactly one {BACKGROUND:?} object is required, got {backgrounds}"));
        }
        let extent = cfg.scene_extent;
        for (i, o) in self.objects.iter().enumerate() {
            let f = |name: &str| format!("objects[{i}].{name}");
            let Ok(gen) = cfg.category(&o.category) else {
                let known: Vec<&str> = std::iter::once(BACKGROUND)
                    .chain(cfg.foreground.iter().map(|c| c.name.as_str()))
                    .collect();
                push(&mut errors, f("category"), format!("unknown category {:?}; expected one of {known:?}", o.category));
                continue;
            };
            check_latent(&mut errors, &f("z"), &o.z, gen.z_dim);
            let p = &o.pose;
            if check_finite(&mut errors, f("pose.scale"), p.scale) {
                if o.category == BACKGROUND {
                    if p.scale != 1.0 {
                        push(&mut errors, f("pose.scale"), "background scale is fixed to 1");
                    }
                } else if !(p.scale > 0.0 && p.scale <= 1.0) {
                    push(&mut errors, f("pose.scale"), format!("must be in (0, 1], got {}", p.scale));
                }
            }
            check_finite(&mut errors, f("pose.azimuth_deg"), p.azimuth_deg);
            for (name, t) in [("pose.tx", p.tx), ("pose.ty", p.ty), ("pose.tz", p.tz)] {
                if check_finite(&mut errors, f(name), t) && t.abs() > extent {
                    push(&mut errors, f(name), format!("must be within +-{extent}, got {t}"));
                }
            }
        }
        let c = &self.camera;
        if check_finite(&mut errors, "camera.elevation_deg".into(), c.elevation_deg) && c.elevation_deg.abs() > MAX_ELEVATION_DEG {
            push(
                &mut errors,
                "camera.elevation_deg",
                format!("must be within +-{MAX_ELEVATION_DEG}, got {}", c.elevation_deg),
            );
        }
        check_finite(&mut errors, "camera.azimuth_deg".into(), c.azimuth_deg);
        for (name, v) in [("camera.focal_mm", c.focal_mm), ("camera.sensor_mm", c.sensor_mm)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    push(&mut errors, name, format!("must be positive, got {v}"));
                }
            }
        }
        if errors.is_empty() {
            let mut k = cfg.camera;
            if let Some(f) = c.focal_mm {
                k.focal_mm = f;
            }
            if let Some(s) = c.sensor_mm {
                k.sensor_mm = s;
            }
            if let Err(e) = k.validate() {
                push(&mut errors, "camera", e.to_string());
            }
        }
        let composer = self.composer.unwrap_or(cfg.composer);
        if composer == ComposerMode::Mlp && n != cfg.num_foreground + 1 {
            push(
                &mut errors,
                "objects",
                format!(
                    "mlp composer needs exactly {} objects, got {n}",
                    cfg.num_foreground + 1
                ),
            );
        }
        if composer == ComposerMode::Mlp && cfg.composer != ComposerMode::Mlp {
            push(&mut errors, "composer", "model was not trained with an mlp composer");
        }
        errors
    }

    /// Generator input; call after [`GenerateRequest::validate`] returns nothing.
    pub fn to_spec(&self) -> SceneSpec {
        SceneSpec {
            objects: self
                .objects
                .iter()
                .map(|o| ObjectSpec {
                    category: o.category.clone(),
                    latent: o.z.clone(),
                    pose: Pose {
                        scale: o.pose.scale,
                        azimuth_deg: o.pose.azimuth_deg,
                        elevation_deg: 0.0,
                        translation: [o.pose.tx, o.pose.ty, o.pose.tz],
                    },
                    edits: vec![],
                })
                .collect(),
            camera: CameraSpec {
                azimuth_deg: self.camera.azimuth_deg,
                elevation_deg: self.camera.elevation_deg,
                distance: None,
                focal_mm: self.camera.focal_mm,
                sensor_mm: self.camera.sensor_mm,
            },
            composer: self.composer,
        }
    }
}

impl InterpolateRequest {
    pub fn validate(&self, cfg: &ModelConfig) -> Vec<FieldError> {
        let mut errors: Vec<FieldError> = self
            .scene
            .validate(cfg)
            .into_iter()
            .map(|e| FieldError {
                field: format!("scene.{}", e.field),
                message: e.message,
            })
            .collect();
        if !(2..=MAX_INTERPOLATION_STEPS).contains(&self.steps) {
            push(&mut errors, "steps", format!("must be in 2..={MAX_INTERPOLATION_STEPS}, got {}", self.steps));
        }
        match self.scene.objects.get(self.object) {
            None => push(&mut errors, "object", format!("no object at index {}", self.object)),
            Some(o) => {
                if let Ok(gen) = cfg.category(&o.category) {
                    check_latent(&mut errors, "from", &self.from, gen.z_dim);
                    check_latent(&mut errors, "to", &self.to, gen.z_dim);
                }
            }
        }
        errors
    }

    /// One scene per step with the chosen object's latent blended linearly.
    pub fn frames(&self, cfg: &ModelConfig) -> blockgan::Result<Vec<SceneSpec>> {
        let o = &self.scene.objects[self.object];
        let dim = cfg.category(&o.category)?.z_dim;
        let (a, b) = (self.from.resolve(dim)?, self.to.resolve(dim)?);
        let base = self.scene.to_spec();
        Ok((0..self.steps)
            .map(|k| {
                let t = k as f32 / (self.steps - 1) as f32;
                let z = a.iter().zip(&b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
                let mut spec = base.clone();
                spec.objects[self.object].latent = Latent::Vector(z);
                spec
            })
            .collect())
    }
}
