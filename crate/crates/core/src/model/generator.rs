//! The generator graph: style maps, object feature generators, posing,
//! composition, projection and the 2-D decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ComposerMode, ModelConfig, ObjectGenConfig, BACKGROUND};
use crate::error::{Error, Result};
use crate::geometry::{
    fused_object_to_camera, resample_taps, CameraIntrinsics, CameraPose, Mat4, Pose,
};
use crate::graph::{Graph, Padding, ReduceMode, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Parameter-name prefix of one object generator.
pub fn gen_prefix(name: &str) -> String {
    format!("gen/{name}")
}

fn init_style(p: &mut ParamStore, prefix: &str, z_dim: usize, channels: usize, rng: &mut impl Rng) -> Result<()> {
    p.weight(&format!("{prefix}/gamma_w"), &[z_dim, channels], rng)?;
    p.bias(&format!("{prefix}/gamma_b"), channels)?;
    p.weight(&format!("{prefix}/beta_w"), &[z_dim, channels], rng)?;
    p.bias(&format!("{prefix}/beta_b"), channels)?;
    Ok(())
}

fn init_object(p: &mut ParamStore, gen: &ObjectGenConfig, rng: &mut impl Rng) -> Result<()> {
    let pre = gen_prefix(&gen.name);
    let s = gen.constant_size;
    p.weight(&format!("{pre}/const"), &[1, s, s, s, gen.constant_channels], rng)?;
    init_style(p, &format!("{pre}/style0"), gen.z_dim, gen.constant_channels, rng)?;
    let mut cin = gen.constant_channels;
    for (i, &cout) in gen.channels.iter().enumerate() {
        p.weight(&format!("{pre}/up{i}/k"), &[3, 3, 3, cout, cin], rng)?;
        init_style(p, &format!("{pre}/style{}", i + 1), gen.z_dim, cout, rng)?;
        cin = cout;
    }
    Ok(())
}

/// Fresh generator parameters.
pub fn init_generator(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    init_object(&mut p, &cfg.background, rng)?;
    for fg in &cfg.foreground {
        init_object(&mut p, fg, rng)?;
    }
    let c = cfg.feature_channels();
    if cfg.composer == ComposerMode::Mlp {
        p.weight("gen/compose/w", &[(cfg.num_foreground + 1) * c, c], rng)?;
        p.bias("gen/compose/b", c)?;
    }
    let depth_channels = cfg.grid_size() * c;
    p.weight("gen/proj/k", &[1, 1, depth_channels, cfg.projection_channels], rng)?;
    p.bias("gen/proj/b", cfg.projection_channels)?;
    let zdec = cfg.decoder_z_dim();
    let mut cin = cfg.projection_channels;
    let outs: Vec<usize> = cfg.decoder_channels.iter().copied().chain([3]).collect();
    for (i, &cout) in outs.iter().enumerate() {
        p.weight(&format!("gen/dec{i}/k"), &[4, 4, cout, cin], rng)?;
        init_style(&mut p, &format!("gen/dec{i}/style"), zdec, cout, rng)?;
        cin = cout;
    }
    Ok(p)
}

/// Per-channel `(gamma, beta)` from `z` (`[N, z_dim]`); gamma is `1 + linear(z)`.
pub fn style_map<T: Real>(g: &mut Graph<T>, b: &Bound, prefix: &str, z: Var) -> Result<(Var, Var)> {
    let gw = b.get(&format!("{prefix}/gamma_w"))?;
    let zs = g.shape(z).to_vec();
    let ws = g.shape(gw).to_vec();
    if zs.len() != 2 || zs[1] != ws[0] {
        return Err(Error::shape(
            "style_map",
            format!("latent {zs:?} does not match style map input width {}", ws[0]),
        ));
    }
    let gamma = g.linear(z, gw, Some(b.get(&format!("{prefix}/gamma_b"))?))?;
    let gamma = g.add_scalar(gamma, T::one());
    let beta = g.linear(z, b.get(&format!("{prefix}/beta_w"))?, Some(b.get(&format!("{prefix}/beta_b"))?))?;
    Ok((gamma, beta))
}

/// Records the output shape of every generator stage.
#[derive(Clone, Debug, Default)]
pub struct ShapeTrace {
    pub layers: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    fn push<T: Real>(&mut self, g: &Graph<T>, name: impl Into<String>, v: Var) {
        self.layers.push((name.into(), g.shape(v).to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

/// Canonical-space features `[N, S, S, S, C]` for latents `z` (`[N, z_dim]`).
pub fn generate_object<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    gen: &ObjectGenConfig,
    z: Var,
    trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let pre = gen_prefix(&gen.name);
    let zs = g.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != gen.z_dim {
        return Err(Error::shape(
            "generate_object",
            format!("{}: latent shape {zs:?}, expected [N, {}]", gen.name, gen.z_dim),
        ));
    }
    let n = zs[0];
    let mut local = ShapeTrace::default();
    let c = b.get(&format!("{pre}/const"))?;
    let mut x = if n == 1 { c } else { g.repeat_batch(c, n)? };
    let (gamma, beta) = style_map(g, b, &format!("{pre}/style0"), z)?;
    x = g.adain(x, gamma, beta)?;
    x = g.activation(x, cfg.activation);
    local.push(g, format!("{}/const", gen.name), x);
    for i in 0..gen.channels.len() {
        x = g.conv_transpose3d(x, b.get(&format!("{pre}/up{i}/k"))?, 2)?;
        let (gamma, beta) = style_map(g, b, &format!("{pre}/style{}", i + 1), z)?;
        x = g.adain(x, gamma, beta)?;
        x = g.activation(x, cfg.activation);
        local.push(g, format!("{}/up{i}", gen.name), x);
    }
    if let Some(t) = trace {
        t.layers.extend(local.layers);
    }
    Ok(x)
}

/// The single fused object-to-camera-cube matrix for one object.
pub fn object_transform(cfg: &ModelConfig, pose: &Pose, camera: &CameraPose, intrinsics: &CameraIntrinsics) -> Result<Mat4> {
    let scaled = Pose {
        translation: pose.translation.map(|t| t / cfg.scene_extent),
        ..*pose
    };
    fused_object_to_camera(&scaled, camera, intrinsics)
}

/// Resample canonical features into the camera cube, one pose per batch item.
pub fn pose_and_project<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    features: Var,
    poses: &[Pose],
    cameras: &[CameraPose],
    intrinsics: &CameraIntrinsics,
) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 5 || poses.len() != s[0] || cameras.len() != s[0] {
        return Err(Error::shape(
            "pose_and_project",
            format!("features {s:?} with {} poses and {} cameras", poses.len(), cameras.len()),
        ));
    }
    let dims = [s[1], s[2], s[3]];
    let taps = poses
        .iter()
        .zip(cameras)
        .map(|(p, c)| resample_taps(dims, &object_transform(cfg, p, c, intrinsics)?))
        .collect::<Result<Vec<_>>>()?;
    g.resample(features, &taps)
}

/// Merge camera-space object features, background first.
pub fn compose_scene<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    objects: &[Var],
    mode: ComposerMode,
) -> Result<Var> {
    if objects.is_empty() {
        return Err(Error::invalid("compose_scene", "no objects to compose"));
    }
    match mode {
        ComposerMode::Max => g.reduce(objects, ReduceMode::Max),
        ComposerMode::Sum => g.reduce(objects, ReduceMode::Sum),
        ComposerMode::Mlp => {
            let arity = cfg.num_foreground + 1;
            if objects.len() != arity {
                return Err(Error::invalid(
                    "compose_scene",
                    format!(
                        "mlp composer was trained on {arity} objects and cannot compose {}",
                        objects.len()
                    ),
                ));
            }
            let s = g.shape(objects[0]).to_vec();
            let c = s[4];
            let rows = s[..4].iter().product::<usize>();
            let cat = g.concat(objects)?;
            let flat = g.reshape(cat, &[rows, arity * c])?;
            let w = b.get("gen/compose/w")?;
            let y = g.linear(flat, w, Some(b.get("gen/compose/b")?))?;
            let y = g.activation(y, cfg.activation);
            g.reshape(y, &s)
        }
    }
}

/// Depth-to-channel reshape, then the 1x1 projection conv and activation.
pub fn project_to_2d<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, scene: Var) -> Result<Var> {
    let flat = g.depth_to_channels(scene)?;
    let y = g.conv2d(flat, b.get("gen/proj/k")?, 1, Padding::Same)?;
    let y = g.add_bias(y, b.get("gen/proj/b")?)?;
    Ok(g.activation(y, cfg.activation))
}

/// Upconv decoder to a tanh image `[N, image, image, 3]`.
pub fn decode_image<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    features: Var,
    style_z: Var,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let mut x = features;
    let last = cfg.decoder_channels.len();
    for i in 0..=last {
        let stride = if i < last { 2 } else { 1 };
        x = g.conv_transpose2d(x, b.get(&format!("gen/dec{i}/k"))?, stride)?;
        let (gamma, beta) = style_map(g, b, &format!("gen/dec{i}/style"), style_z)?;
        x = g.adain(x, gamma, beta)?;
        x = if i < last {
            g.activation(x, cfg.activation)
        } else {
            g.activation(x, crate::graph::Activation::Tanh)
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(g, format!("dec{i}"), x);
        }
    }
    Ok(x)
}

/// Test-time edits applied to canonical object features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureEdit {
    /// Anisotropic scale along one canonical axis.
    Stretch { axis: Axis, factor: f64 },
    /// Voxels at or beyond `index` along `axis` are taken from the object
    /// generated by `other`.
    SplitCombine { other: Latent, axis: Axis, index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    /// Position of this axis in `[H, W, D]` grid order.
    fn grid_axis(self) -> usize {
        match self {
            Axis::X => 1,
            Axis::Y => 0,
            Axis::Z => 2,
        }
    }
}

/// Stretch `features` (`[N, S, S, S, C]`) by `factor` along `axis`.
pub fn stretch<T: Real>(g: &mut Graph<T>, features: Var, axis: Axis, factor: f64) -> Result<Var> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid("feature_surgery", format!("stretch factor {factor} must be positive")));
    }
    let s = g.shape(features).to_vec();
    if s.len() != 5 {
        return Err(Error::shape("feature_surgery", format!("features {s:?}")));
    }
    let mut k = [1.0; 3];
    k[axis as usize] = factor;
    let taps = resample_taps([s[1], s[2], s[3]], &Mat4::scaling(k))?;
    g.resample(features, &vec![taps; s[0]])
}

/// Keep `a` below `index` along `axis` and take `other` from `index` on.
pub fn split_combine<T: Real>(g: &mut Graph<T>, a: Var, other: Var, axis: Axis, index: usize) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 5 || g.shape(other) != s.as_slice() {
        return Err(Error::shape(
            "feature_surgery",
            format!("split_combine {s:?} vs {:?}", g.shape(other)),
        ));
    }
    let ax = axis.grid_axis();
    let extent = s[1 + ax];
    if index > extent {
        return Err(Error::invalid(
            "feature_surgery",
            format!("split plane {index} outside grid extent {extent} along {axis:?}"),
        ));
    }
    let mut keep = Vec::with_capacity(s.iter().product());
    for _ in 0..s[0] {
        for h in 0..s[1] {
            for w in 0..s[2] {
                for d in 0..s[3] {
                    let coord = [h, w, d][ax];
                    let v = if coord < index { T::one() } else { T::zero() };
                    keep.extend(std::iter::repeat_n(v, s[4]));
                }
            }
        }
    }
    let take: Vec<T> = keep.iter().map(|&v| T::one() - v).collect();
    let keep = g.constant(Tensor::new(&s, keep)?);
    let take = g.constant(Tensor::new(&s, take)?);
    let left = g.mul(a, keep)?;
    let right = g.mul(other, take)?;
    g.add(left, right)
}

/// A latent given explicitly or as a seed for the standard-normal expander.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Latent {
    Seed(u64),
    Vector(Vec<f32>),
}

impl Latent {
    pub fn resolve(&self, dim: usize) -> Result<Vec<f32>> {
        match self {
            Latent::Seed(s) => Ok(crate::pose::latent_from_seed(*s, dim)),
            Latent::Vector(v) => {
                if v.len() != dim {
                    return Err(Error::invalid(
                        "latent",
                        format!("vector has {} entries, expected {dim}", v.len()),
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid("latent", "vector entries must be finite"));
                }
                Ok(v.clone())
            }
        }
    }
}

/// One batch slot: a category with per-item latents and poses.
#[derive(Clone, Debug)]
pub struct ObjectSlot {
    pub category: String,
    /// `[N, z_dim]`
    pub z: Tensor<f32>,
    pub poses: Vec<Pose>,
    pub edits: Vec<FeatureEdit>,
}

/// Generator input for `N` scenes sharing one object layout.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub background: ObjectSlot,
    pub foreground: Vec<ObjectSlot>,
    pub cameras: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
    pub composer: ComposerMode,
}

impl SceneBatch {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Mean of `values`, summed in sorted order so the result ignores input order.
fn order_free_mean(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    values.iter().fold(0.0f32, |acc, &v| acc + v) / values.len() as f32
}

/// `[N, decoder_z_dim]`: background z, then the mean z of each foreground
/// category (zeros for a category with no objects).
pub fn decoder_style_input(cfg: &ModelConfig, batch: &SceneBatch) -> Result<Tensor<f32>> {
    let n = batch.len();
    let width = cfg.decoder_z_dim();
    let mut out = Vec::with_capacity(n * width);
    let bg = &batch.background.z;
    for i in 0..n {
        out.extend_from_slice(bg.batch_item(i).data());
        for cat in &cfg.foreground {
            let members: Vec<&ObjectSlot> = batch.foreground.iter().filter(|s| s.category == cat.name).collect();
            for j in 0..cat.z_dim {
                if members.is_empty() {
                    out.push(0.0);
                } else {
                    let mut vals: Vec<f32> = members.iter().map(|s| s.z.data()[i * cat.z_dim + j]).collect();
                    out.push(order_free_mean(&mut vals));
                }
            }
        }
    }
    Tensor::new(&[n, width], out)
}

/// Vars holding each stage of a generator pass.
#[derive(Clone, Debug)]
pub struct GenOutput {
    pub image: Var,
    /// Canonical features per slot, background first.
    pub object_features: Vec<Var>,
    /// Camera-space features per slot, background first.
    pub camera_features: Vec<Var>,
    pub scene: Var,
    pub projected: Var,
    pub trace: ShapeTrace,
}

fn validate_slot<'a>(cfg: &'a ModelConfig, slot: &ObjectSlot, n: usize) -> Result<&'a ObjectGenConfig> {
    let gen = cfg.category(&slot.category)?;
    if slot.z.shape() != [n, gen.z_dim] {
        return Err(Error::shape(
            "generate",
            format!("{}: latents {:?}, expected [{n}, {}]", slot.category, slot.z.shape(), gen.z_dim),
        ));
    }
    if slot.poses.len() != n {
        return Err(Error::shape(
            "generate",
            format!("{}: {} poses for batch of {n}", slot.category, slot.poses.len()),
        ));
    }
    for p in &slot.poses {
        if !(p.scale > 0.0) || !p.translation.iter().all(|t| t.is_finite()) || !p.azimuth_deg.is_finite() {
            return Err(Error::invalid("generate", format!("{}: invalid pose {p:?}", slot.category)));
        }
    }
    Ok(gen)
}

fn slot_features<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    gen: &ObjectGenConfig,
    slot: &ObjectSlot,
    trace: &mut ShapeTrace,
) -> Result<Var> {
    let z = g.constant(slot.z.cast::<T>());
    let mut x = generate_object(g, b, cfg, gen, z, Some(trace))?;
    for edit in &slot.edits {
        x = match edit {
            FeatureEdit::Stretch { axis, factor } => stretch(g, x, *axis, *factor)?,
            FeatureEdit::SplitCombine { other, axis, index } => {
                let zo = other.resolve(gen.z_dim)?;
                let n = slot.z.shape()[0];
                let mut rep = Vec::with_capacity(n * gen.z_dim);
                for _ in 0..n {
                    rep.extend_from_slice(&zo);
                }
                let zo = g.constant(Tensor::new(&[n, gen.z_dim], rep)?.cast::<T>());
                let xo = generate_object(g, b, cfg, gen, zo, None)?;
                split_combine(g, x, xo, *axis, *index)?
            }
        };
    }
    Ok(x)
}

/// Full generator pass: object features, posing, composition, projection, decoding.
pub fn generate<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, batch: &SceneBatch) -> Result<GenOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("generate", "empty batch"));
    }
    batch.intrinsics.validate()?;
    if batch.background.category != BACKGROUND {
        return Err(Error::invalid("generate", "first slot must be the background"));
    }
    let mut trace = ShapeTrace::default();
    let mut object_features = Vec::new();
    let mut camera_features = Vec::new();
    for slot in std::iter::once(&batch.background).chain(&batch.foreground) {
        let gen = validate_slot(cfg, slot, n)?;
        if slot.category != BACKGROUND && std::ptr::eq(gen, &cfg.background) {
            return Err(Error::invalid("generate", "only one background object allowed"));
        }
        let x = slot_features(g, b, cfg, gen, slot, &mut trace)?;
        object_features.push(x);
        let cam = pose_and_project(g, cfg, x, &slot.poses, &batch.cameras, &batch.intrinsics)?;
        trace.push(g, format!("{}/camera", slot.category), cam);
        camera_features.push(cam);
    }
    let scene = compose_scene(g, b, cfg, &camera_features, batch.composer)?;
    trace.push(g, "compose", scene);
    let flat = g.depth_to_channels(scene)?;
    trace.push(g, "depth_to_channels", flat);
    let projected = project_to_2d(g, b, cfg, scene)?;
    trace.push(g, "projection", projected);
    let style = decoder_style_input(cfg, batch)?;
    let style = g.constant(style.cast::<T>());
    let image = decode_image(g, b, cfg, projected, style, Some(&mut trace))?;
    Ok(GenOutput {
        image,
        object_features,
        camera_features,
        scene,
        projected,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub category: String,
    pub latent: Latent,
    #[serde(default)]
    pub pose: Pose,
    #[serde(default)]
    pub edits: Vec<FeatureEdit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    #[serde(default)]
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default)]
    pub focal_mm: Option<f64>,
    #[serde(default)]
    pub sensor_mm: Option<f64>,
}

/// Inference-time scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub camera: CameraSpec,
    #[serde(default)]
    pub composer: Option<ComposerMode>,
}

impl SceneSpec {
    /// Single-item batch for this spec.
    pub fn to_batch(&self, cfg: &ModelConfig) -> Result<SceneBatch> {
        let mut background = None;
        let mut foreground = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            let gen = cfg
                .category(&o.category)
                .map_err(|e| Error::invalid("scene_spec", format!("objects[{i}]: {e}")))?;
            let z = o
                .latent
                .resolve(gen.z_dim)
                .map_err(|e| Error::invalid("scene_spec", format!("objects[{i}].latent: {e}")))?;
            let slot = ObjectSlot {
                category: o.category.clone(),
                z: Tensor::new(&[1, gen.z_dim], z)?,
                poses: vec![o.pose],
                edits: o.edits.clone(),
            };
            if o.category == BACKGROUND {
                if background.is_some() {
                    return Err(Error::invalid("scene_spec", "more than one background object"));
                }
                if o.pose.scale != 1.0 {
                    return Err(Error::invalid(
                        "scene_spec",
                        format!("objects[{i}].pose.scale: background scale is fixed to 1, got {}", o.pose.scale),
                    ));
                }
                background = Some(slot);
            } else {
                foreground.push(slot);
            }
        }
        let background = background.ok_or_else(|| Error::invalid("scene_spec", "a background object is required"))?;
        let mut intrinsics = cfg.camera;
        if let Some(f) = self.camera.focal_mm {
            intrinsics.focal_mm = f;
        }
        if let Some(s) = self.camera.sensor_mm {
            intrinsics.sensor_mm = s;
        }
        intrinsics.validate()?;
        let camera = CameraPose {
            azimuth_deg: self.camera.azimuth_deg,
            elevation_deg: self.camera.elevation_deg,
            distance: self.camera.distance.unwrap_or(cfg.camera_distance),
        };
        if !(camera.distance > 0.0) || !camera.elevation_deg.is_finite() || !camera.azimuth_deg.is_finite() {
            return Err(Error::invalid("scene_spec", "camera pose must be finite with positive distance"));
        }
        Ok(SceneBatch {
            background,
            foreground,
            cameras: vec![camera],
            intrinsics,
            composer: self.composer.unwrap_or(cfg.composer),
        })
    }
}

/// Render `spec` with frozen parameters; returns a `[1, H, W, 3]` image in [-1, 1].
pub fn render_spec(params: &ParamStore, cfg: &ModelConfig, spec: &SceneSpec) -> Result<Tensor<f32>> {
    let batch = spec.to_batch(cfg)?;
    render_batch(params, cfg, &batch)
}

/// Frozen-parameter forward pass; returns `[N, H, W, 3]`.
pub fn render_batch(params: &ParamStore, cfg: &ModelConfig, batch: &SceneBatch) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, false);
    let out = generate(&mut g, &b, cfg, batch)?;
    let img = g.value(out.image).clone();
    if !img.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: "generated image".into(),
        });
    }
    Ok(img)
}
