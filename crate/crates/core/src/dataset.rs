//! Built-in ray-traced toy scenes and image-directory loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_of_view, CameraIntrinsics, CameraPose, Mat4, Pose};
use crate::pose::{sample_camera, sample_pose, Interval, PoseRanges};
use crate::tensor::Tensor;

pub const AMBIENT: f64 = 0.15;
const GROUND_ALBEDO: [f64; 3] = [0.6, 0.6, 0.6];
const SKY: [f64; 3] = [0.22, 0.24, 0.28];
/// Sphere radius and box half-extent in the object frame, before scaling.
const SPHERE_RADIUS: f64 = 0.5;
const BOX_HALF: f64 = 0.4;
const SHADOW_BIAS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub primitive: Primitive,
    pub albedo: [f64; 3],
    /// Ground-plane pose; the primitive rests on the ground below its translation.
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneParams {
    pub objects: Vec<ToyObject>,
    /// Unit vector pointing towards the light.
    pub light: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraPose,
    pub image_size: usize,
    pub ground_y: f64,
}

impl ToyObject {
    /// Radius (sphere) or half-extent (box) in scene units.
    pub fn extent(&self) -> f64 {
        match self.primitive {
            Primitive::Sphere => SPHERE_RADIUS * self.pose.scale,
            Primitive::Box => BOX_HALF * self.pose.scale,
        }
    }

    pub fn center(&self, ground_y: f64) -> [f64; 3] {
        let t = self.pose.translation;
        [t[0], ground_y + self.extent() + t[1], t[2]]
    }
}

/// Output of [`render_toy`]: the 8-bit image plus renderer-internal masks.
#[derive(Clone, Debug)]
pub struct ToyRender {
    pub size: usize,
    /// Row-major RGB bytes.
    pub rgb: Vec<u8>,
    /// `k + 1` where the primary ray first hits object `k`, else 0.
    pub object_mask: Vec<u16>,
    /// Ground pixels whose shadow ray is blocked.
    pub shadow_mask: Vec<bool>,
    /// Primary hit distance, infinite for sky.
    pub depth: Vec<f64>,
    /// Primary hit point, meaningful where `depth` is finite.
    pub hit: Vec<[f64; 3]>,
}

impl ToyRender {
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.size as u32, self.size as u32, self.rgb.clone()).expect("buffer sized at render")
    }

    /// Pixels normalised to `[-1, 1]`, shape `[S, S, 3]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.rgb.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Tensor::new(&[self.size, self.size, 3], data).expect("buffer sized at render")
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn along(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest positive root of `|o + t d - c|^2 = r^2` for unit `d`.
pub fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = sub(o, c);
    let b = dot(oc, d);
    let q = dot(oc, oc) - r * r;
    let disc = b * b - q;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    if t0 > 0.0 {
        return Some(t0);
    }
    let t1 = -b + s;
    (t1 > 0.0).then_some(t1)
}

/// Slab test against a box of half-extent `h` rotated by `az` about y.
/// Returns the entry distance and the scene-space normal.
fn ray_box(o: [f64; 3], d: [f64; 3], c: [f64; 3], h: f64, az: f64) -> Option<(f64, [f64; 3])> {
    let to_local = Mat4::rotation_y(-az);
    let lo = to_local.apply(sub(o, c));
    let ld = to_local.apply(d);
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if ld[a].abs() < 1e-15 {
            if lo[a].abs() > h {
                return None;
            }
            continue;
        }
        let t1 = (-h - lo[a]) / ld[a];
        let t2 = (h - lo[a]) / ld[a];
        let (near, far, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if near > tmin {
            tmin = near;
            axis = a;
            sign = s;
        }
        tmax = tmax.min(far);
    }
    if tmin > tmax || tmax <= 0.0 || tmin <= 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((tmin, Mat4::rotation_y(az).apply(n)))
}

fn hit_object(obj: &ToyObject, ground_y: f64, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let c = obj.center(ground_y);
    match obj.primitive {
        Primitive::Sphere => ray_sphere(o, d, c, obj.extent()).map(|t| (t, normalize(sub(along(o, d, t), c)))),
        Primitive::Box => ray_box(o, d, c, obj.extent(), obj.pose.azimuth_deg),
    }
}

fn nearest(params: &ToySceneParams, o: [f64; 3], d: [f64; 3]) -> Option<(usize, f64, [f64; 3])> {
    let mut best: Option<(usize, f64, [f64; 3])> = None;
    for (k, obj) in params.objects.iter().enumerate() {
        if let Some((t, n)) = hit_object(obj, params.ground_y, o, d) {
            if best.is_none_or(|b| t < b.1) {
                best = Some((k, t, n));
            }
        }
    }
    best
}

fn occluded(params: &ToySceneParams, p: [f64; 3], n: [f64; 3]) -> bool {
    let o = along(p, n, SHADOW_BIAS);
    params
        .objects
        .iter()
        .any(|obj| hit_object(obj, params.ground_y, o, params.light).is_some())
}

fn shade(albedo: [f64; 3], n: [f64; 3], light: [f64; 3], lit: bool) -> [f64; 3] {
    let diffuse = if lit { dot(n, light).max(0.0) } else { 0.0 };
    albedo.map(|a| a * diffuse + AMBIENT * a)
}

/// World-space primary ray through the centre of pixel `(row, col)`.
pub fn primary_ray(params: &ToySceneParams, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
    let s = params.image_size as f64;
    let half = (angle_of_view(&params.intrinsics).to_radians() / 2.0).tan();
    let u = (2.0 * col as f64 + 1.0 - s) / s * half;
    let v = -(2.0 * row as f64 + 1.0 - s) / s * half;
    let to_scene = params.camera.camera_to_scene();
    let origin = params.camera.position();
    let tip = to_scene.apply([u, v, -1.0]);
    (origin, normalize(sub(tip, origin)))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ray-cast the scene: Lambertian shading with ambient term, hard shadows
/// from a directional light, grey ground plane and flat sky.
pub fn render_toy(params: &ToySceneParams) -> ToyRender {
    let s = params.image_size;
    let px: Vec<(u16, bool, f64, [f64; 3], [f64; 3])> = (0..s * s)
        .into_par_iter()
        .map(|i| {
            let (o, d) = primary_ray(params, i / s, i % s);
            let ground_t = if d[1] < 0.0 { (params.ground_y - o[1]) / d[1] } else { f64::INFINITY };
            match nearest(params, o, d) {
                Some((k, t, n)) if t < ground_t => {
                    let p = along(o, d, t);
                    let lit = !occluded(params, p, n);
                    let c = shade(params.objects[k].albedo, n, params.light, lit);
                    (k as u16 + 1, false, t, p, c)
                }
                _ if ground_t.is_finite() && ground_t > 0.0 => {
                    let p = along(o, d, ground_t);
                    let n = [0.0, 1.0, 0.0];
                    let blocked = occluded(params, p, n);
                    let c = shade(GROUND_ALBEDO, n, params.light, !blocked);
                    (0, blocked, ground_t, p, c)
                }
                _ => (0, false, f64::INFINITY, [0.0; 3], SKY),
            }
        })
        .collect();
    let mut out = ToyRender {
        size: s,
        rgb: Vec::with_capacity(3 * s * s),
        object_mask: Vec::with_capacity(s * s),
        shadow_mask: Vec::with_capacity(s * s),
        depth: Vec::with_capacity(s * s),
        hit: Vec::with_capacity(s * s),
    };
    for (m, sh, t, p, c) in px {
        out.object_mask.push(m);
        out.shadow_mask.push(sh);
        out.depth.push(t);
        out.hit.push(p);
        out.rgb.extend(c.map(to_byte));
    }
    out
}

/// Number of 4-connected components of the pixels selected by `mask`.
pub fn connected_components(size: usize, mask: impl Fn(usize) -> bool) -> usize {
    let mut seen = vec![false; size * size];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..size * size {
        if seen[start] || !mask(start) {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / size, i % size);
            let mut visit = |j: usize| {
                if !seen[j] && mask(j) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - size);
            }
            if r + 1 < size {
                visit(i + size);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < size {
                visit(i + 1);
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveChoice {
    #[default]
    Sphere,
    Box,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub count: usize,
    pub image_size: usize,
    pub num_objects: usize,
    #[serde(default)]
    pub primitive: PrimitiveChoice,
    pub pose: PoseRanges,
    /// Light elevation above the ground plane, degrees.
    pub light_elevation: Interval,
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    pub camera_distance: f64,
    pub ground_y: f64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            count: 2000,
            image_size: 32,
            num_objects: 1,
            primitive: PrimitiveChoice::Sphere,
            pose: PoseRanges::toy(),
            light_elevation: Interval::new(35.0, 65.0),
            intrinsics: CameraIntrinsics::default(),
            camera_distance: 1.5,
            ground_y: -0.3,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.image_size == 0 {
            return Err(Error::Config("dataset count and image_size must be positive".into()));
        }
        if self.num_objects > 8 {
            return Err(Error::Config("at most 8 objects per toy scene".into()));
        }
        self.light_elevation.validate("light_elevation")?;
        if !(self.light_elevation.lo > 0.0 && self.light_elevation.hi < 90.0) {
            return Err(Error::Config("light_elevation must lie in (0, 90)".into()));
        }
        self.intrinsics.validate()?;
        self.pose.validate()
    }
}

const MAX_LAYOUT_ATTEMPTS: usize = 200;

fn bounding_radius(o: &ToyObject) -> f64 {
    match o.primitive {
        Primitive::Sphere => o.extent(),
        Primitive::Box => o.extent() * 3f64.sqrt(),
    }
}

fn separated(a: &ToyObject, b: &ToyObject, ground_y: f64, camera: &CameraPose) -> bool {
    let (ca, cb) = (a.center(ground_y), b.center(ground_y));
    let gap = bounding_radius(a) + bounding_radius(b);
    if dot(sub(ca, cb), sub(ca, cb)).sqrt() < gap + 0.05 {
        return false;
    }
    // Angular separation as seen from the camera keeps silhouettes apart.
    let eye = camera.position();
    let (da, db) = (sub(ca, eye), sub(cb, eye));
    let (la, lb) = (dot(da, da).sqrt(), dot(db, db).sqrt());
    let angle = (dot(da, db) / (la * lb)).clamp(-1.0, 1.0).acos();
    let ra = (bounding_radius(a) / la).asin();
    let rb = (bounding_radius(b) / lb).asin();
    angle > 1.15 * (ra + rb)
}

/// Scene `index` of the dataset; a pure function of `(config, seed, index)`.
pub fn toy_scene(cfg: &ToyDatasetConfig, seed: u64, index: usize) -> ToySceneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let camera = sample_camera(&mut rng, &cfg.pose, cfg.camera_distance);
    let light_az: f64 = rng.random_range(0.0..360.0);
    let light_el = cfg.light_elevation.sample(&mut rng);
    let (ea, aa) = (light_el.to_radians(), light_az.to_radians());
    let light = [ea.cos() * aa.sin(), ea.sin(), ea.cos() * aa.cos()];
    let mut objects: Vec<ToyObject> = Vec::with_capacity(cfg.num_objects);
    let mut attempts = 0;
    while objects.len() < cfg.num_objects {
        let primitive = match cfg.primitive {
            PrimitiveChoice::Sphere => Primitive::Sphere,
            PrimitiveChoice::Box => Primitive::Box,
            PrimitiveChoice::Mixed => {
                if rng.random::<bool>() {
                    Primitive::Sphere
                } else {
                    Primitive::Box
                }
            }
        };
        let albedo = [0; 3].map(|_| rng.random_range(0.25..0.95));
        let obj = ToyObject {
            primitive,
            albedo,
            pose: sample_pose(&mut rng, &cfg.pose),
        };
        attempts += 1;
        if attempts > MAX_LAYOUT_ATTEMPTS {
            // Crowded layouts are kept rather than looping forever.
            objects.push(obj);
        } else if objects.iter().all(|o| separated(o, &obj, cfg.ground_y, &camera)) {
            objects.push(obj);
        } else if attempts % 20 == 0 {
            objects.clear();
        }
    }
    ToySceneParams {
        objects,
        light,
        intrinsics: cfg.intrinsics,
        camera,
        image_size: cfg.image_size,
        ground_y: cfg.ground_y,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    pub config: ToyDatasetConfig,
    pub files: Vec<String>,
    pub scenes: Vec<ToySceneParams>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Render `cfg.count` scenes into `dir` as PNG files plus a manifest.
pub fn make_dataset(cfg: &ToyDatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes: Vec<ToySceneParams> = (0..cfg.count).map(|i| toy_scene(cfg, seed, i)).collect();
    let files: Vec<String> = (0..cfg.count).map(|i| format!("{i:06}.png")).collect();
    scenes
        .par_iter()
        .zip(&files)
        .try_for_each(|(scene, name)| -> Result<()> {
            let path = dir.join(name);
            render_toy(scene)
                .to_image()
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| Error::Image { path, source })
        })?;
    let manifest = DatasetManifest {
        count: cfg.count,
        seed,
        config: cfg.clone(),
        files,
        scenes,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Images held in memory at training resolution along one axis.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub size: usize,
    /// `[H, W, 3]` in `[-1, 1]` with `min(H, W) == size`.
    pub images: Vec<Tensor<f32>>,
    pub files: Vec<PathBuf>,
    pub random_crop: bool,
    pub skipped: usize,
}

/// Scale so the smaller side equals `target`, rounding the other side.
pub fn scaled_dims(w: u32, h: u32, target: u32) -> (u32, u32) {
    if w <= h {
        (target, ((h as f64) * target as f64 / w as f64).round() as u32)
    } else {
        (((w as f64) * target as f64 / h as f64).round() as u32, target)
    }
}

fn image_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("rgb buffer")
}

impl ImageSet {
    pub fn from_tensors(size: usize, images: Vec<Tensor<f32>>) -> Result<Self> {
        for t in &images {
            let s = t.shape();
            if s.len() != 3 || s[2] != 3 || s[0].min(s[1]) != size {
                return Err(Error::shape("ImageSet", format!("image {s:?} for size {size}")));
            }
        }
        Ok(ImageSet {
            size,
            files: vec![],
            images,
            random_crop: false,
            skipped: 0,
        })
    }

    /// Load every PNG/JPEG-readable file in `dir` (sorted by name),
    /// skipping unreadable files and those smaller than `size`.
    pub fn load_dir(dir: &Path, size: usize, random_crop: bool) -> Result<Self> {
        let paths = image_paths(dir)?;
        let mut images = Vec::new();
        let mut files = Vec::new();
        let mut skipped = 0;
        for p in paths {
            let img = match image::open(&p) {
                Ok(i) => i.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    skipped += 1;
                    continue;
                }
            };
            let (w, h) = img.dimensions();
            if (w.min(h) as usize) < size {
                log::warn!("skipping {}: {w}x{h} is smaller than {size}", p.display());
                skipped += 1;
                continue;
            }
            let (nw, nh) = scaled_dims(w, h, size as u32);
            let img = if (nw, nh) == (w, h) {
                img
            } else {
                imageops::resize(&img, nw, nh, imageops::FilterType::Triangle)
            };
            images.push(image_tensor(&img));
            files.push(p);
        }
        if skipped > 0 {
            log::warn!("{skipped} images skipped in {}", dir.display());
        }
        if images.is_empty() {
            return Err(Error::Config(format!("no usable images in {}", dir.display())));
        }
        Ok(ImageSet {
            size,
            images,
            files,
            random_crop,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[size, size, 3]` crop of image `i`: random when enabled, else centred.
    pub fn get<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Tensor<f32> {
        let t = &self.images[i];
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let s = self.size;
        if h == s && w == s {
            return t.clone();
        }
        let (oy, ox) = if self.random_crop {
            (rng.random_range(0..=h - s), rng.random_range(0..=w - s))
        } else {
            ((h - s) / 2, (w - s) / 2)
        };
        crop(t, oy, ox, s)
    }

    /// Minibatch `[B, size, size, 3]` for the given indices.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], rng: &mut R) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = indices.iter().map(|&i| self.get(i, rng)).collect();
        Tensor::stack_batch(&items)
    }

    /// All images, centre-cropped, as one batch.
    pub fn all(&self) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        let items: Vec<Tensor<f32>> = idx
            .iter()
            .map(|&i| {
                let t = &self.images[i];
                let (h, w) = (t.shape()[0], t.shape()[1]);
                crop(t, (h - self.size) / 2, (w - self.size) / 2, self.size)
            })
            .collect();
        Tensor::stack_batch(&items)
    }
}

fn crop(t: &Tensor<f32>, oy: usize, ox: usize, s: usize) -> Tensor<f32> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(s * s * 3);
    for r in oy..oy + s {
        let start = (r * w + ox) * 3;
        data.extend_from_slice(&t.data()[start..start + s * 3]);
    }
    Tensor::new(&[s, s, 3], data).expect("crop in bounds")
}

/// Permutation of `0..len` used for epoch `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Write `[H, W, 3]` pixels in `[-1, 1]` as an 8-bit PNG.
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Shorter side of the first readable image in `dir`.
pub fn native_size(dir: &Path) -> Result<usize> {
    image_paths(dir)?
        .iter()
        .find_map(|p| image::image_dimensions(p).ok())
        .map(|(w, h)| w.min(h) as usize)
        .ok_or_else(|| Error::Config(format!("no readable images in {}", dir.display())))
}

fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|x| x.to_str())
        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = tensor_to_image(t)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// PNG bytes for a `[H, W, 3]` or `[1, H, W, 3]` image in [-1, 1].
pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let img = tensor_to_image(t)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(out.into_inner())
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    let (h, w) = match s {
        [h, w, 3] | [1, h, w, 3] => (*h, *w),
        _ => return Err(Error::shape("tensor_to_image", format!("{s:?}"))),
    };
    let bytes = t.data().iter().map(|&v| to_byte((v as f64 + 1.0) / 2.0)).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from shape"))
}

/// Tile `[N, S, S, 3]` images into a near-square grid.
pub fn image_grid(batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = batch.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("image_grid", format!("{s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![-1.0f32; gh * gw * 3];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for r in 0..h {
            let src = ((k * h + r) * w) * 3;
            let dst = ((gr * h + r) * gw + gc * w) * 3;
            out[dst..dst + w * 3].copy_from_slice(&batch.data()[src..src + w * 3]);
        }
    }
    Tensor::new(&[gh, gw, 3], out)
}

#[cfg(test)]
mod tests;
