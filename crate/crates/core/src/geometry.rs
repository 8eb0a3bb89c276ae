//! Object poses, the virtual camera, and trilinear resampling of feature grids.
//!
//! Grid convention: a `[H, W, D, C]` feature grid spans the normalized cube
//! `[-1, 1]^3` with voxel centers on the cube faces (align-corners). Voxel
//! `(h, w, d)` sits at `x = n(w)`, `y = -n(h)`, `z = n(d)` where
//! `n(i) = -1 + 2i / (len - 1)`, so row 0 is the top (`+y`). For camera-space
//! grids the depth axis runs from the near plane (`z = -1`) to the far plane.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Taps;
use crate::tensor::{Real, Tensor};

/// Homogeneous 4x4 transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4(pub [[f64; 4]; 4]);

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    pub fn translation(t: [f64; 3]) -> Mat4 {
        let mut m = Self::IDENTITY;
        for (i, &v) in t.iter().enumerate() {
            m.0[i][3] = v;
        }
        m
    }

    pub fn scaling(s: [f64; 3]) -> Mat4 {
        let mut m = Self::IDENTITY;
        for (i, &v) in s.iter().enumerate() {
            m.0[i][i] = v;
        }
        m
    }

    /// Right-handed rotation about `+y` (the up axis).
    pub fn rotation_y(deg: f64) -> Mat4 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat4([
            [c, 0.0, s, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [-s, 0.0, c, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    /// Right-handed rotation about `+x`.
    pub fn rotation_x(deg: f64) -> Mat4 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat4([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, c, -s, 0.0],
            [0.0, s, c, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    /// Rotation by `deg` about an arbitrary unit `axis` (Rodrigues).
    pub fn rotation_axis(axis: [f64; 3], deg: f64) -> Mat4 {
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = axis.map(|v| v / len);
        let (s, c) = deg.to_radians().sin_cos();
        let t = 1.0 - c;
        Mat4([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y, 0.0],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x, 0.0],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }

    pub fn mul(&self, rhs: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat4(out)
    }

    /// Homogeneous image of `p`, before the perspective divide.
    pub fn apply_h(&self, p: [f64; 3]) -> [f64; 4] {
        let v = [p[0], p[1], p[2], 1.0];
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..4).map(|k| self.0[i][k] * v[k]).sum();
        }
        out
    }

    /// Image of `p` after the perspective divide.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let h = self.apply_h(p);
        [h[0] / h[3], h[1] / h[3], h[2] / h[3]]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Mat4 {
        Mat4(self.0.map(|r| r.map(|v| v * c)))
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Mat4> {
        let mut a = self.0;
        let mut inv = Self::IDENTITY.0;
        let norm = self.frobenius();
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            if a[pivot][col].abs() <= 1e-12 * norm {
                return Err(Error::Singular("transform is not invertible".into()));
            }
            a.swap(col, pivot);
            inv.swap(col, pivot);
            let p = a[col][col];
            for j in 0..4 {
                a[col][j] /= p;
                inv[col][j] /= p;
            }
            for i in 0..4 {
                if i != col {
                    let f = a[i][col];
                    if f != 0.0 {
                        for j in 0..4 {
                            a[i][j] -= f * a[col][j];
                            inv[i][j] -= f * inv[col][j];
                        }
                    }
                }
            }
        }
        Ok(Mat4(inv))
    }

    /// Scale to unit Frobenius norm with the last nonzero entry positive.
    pub fn normalized(&self) -> Mat4 {
        let n = self.frobenius();
        let last = self
            .0
            .iter()
            .flatten()
            .rev()
            .find(|v| v.abs() > 1e-12 * n)
            .copied()
            .unwrap_or(1.0);
        self.scaled(last.signum() / n)
    }

    pub fn max_abs_diff(&self, other: &Mat4) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Object pose: uniform scale, rotation about the up axis, and translation.
/// `elevation_deg` is only meaningful for cameras and is ignored by
/// [`similarity_matrix`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub scale: f64,
    pub azimuth_deg: f64,
    #[serde(default)]
    pub elevation_deg: f64,
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        scale: 1.0,
        azimuth_deg: 0.0,
        elevation_deg: 0.0,
        translation: [0.0; 3],
    };

    /// Azimuth folded into `[0, 360)`.
    pub fn wrapped_azimuth(&self) -> f64 {
        self.azimuth_deg.rem_euclid(360.0)
    }

    /// The pose whose similarity matrix inverts this one.
    pub fn inverse(&self) -> Result<Pose> {
        if self.scale <= 0.0 {
            return Err(Error::invalid("pose", format!("scale {} must be positive", self.scale)));
        }
        // M^-1 = S(1/s) R(-a) T(-t) = T(-R(-a) t / s) R(-a) S(1/s)
        let r = Mat4::rotation_y(-self.azimuth_deg);
        let t = r.apply(self.translation).map(|v| -v / self.scale);
        Ok(Pose {
            scale: 1.0 / self.scale,
            azimuth_deg: -self.azimuth_deg,
            elevation_deg: 0.0,
            translation: t,
        })
    }
}

/// `T(t) * R_y(azimuth) * S(s)`: canonical object coordinates to scene coordinates.
pub fn similarity_matrix(pose: &Pose) -> Result<Mat4> {
    if !(pose.scale > 0.0) {
        return Err(Error::invalid(
            "similarity_matrix",
            format!("scale {} must be positive", pose.scale),
        ));
    }
    Ok(Mat4::translation(pose.translation)
        .mul(&Mat4::rotation_y(pose.azimuth_deg))
        .mul(&Mat4::scaling([pose.scale; 3])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    #[default]
    Perspective,
    WeakPerspective,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_mm: f64,
    pub sensor_mm: f64,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub mode: ProjectionMode,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            focal_mm: 35.0,
            sensor_mm: 32.0,
            near: 0.5,
            far: 2.5,
            mode: ProjectionMode::Perspective,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_mm > 0.0 && self.sensor_mm > 0.0) {
            return Err(Error::invalid("camera", "focal length and sensor size must be positive"));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::invalid(
                "camera",
                format!("need 0 < near < far, got near={} far={}", self.near, self.far),
            ));
        }
        Ok(())
    }

    fn half_tan(&self) -> f64 {
        (self.angle_of_view().to_radians() / 2.0).tan()
    }

    /// Full angle of view in degrees, `2 atan(sensor / (2 focal))`.
    pub fn angle_of_view(&self) -> f64 {
        2.0 * (self.sensor_mm / (2.0 * self.focal_mm)).atan().to_degrees()
    }
}

pub fn angle_of_view(intrinsics: &CameraIntrinsics) -> f64 {
    intrinsics.angle_of_view()
}

/// Orbit camera: positioned at `distance` from the scene origin at the given
/// azimuth and elevation, looking at the origin with `+y` up. At zero
/// azimuth and elevation it sits on `+z` looking down `-z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            azimuth_deg: 0.0,
            elevation_deg: 45.0,
            distance: 1.5,
        }
    }
}

impl CameraPose {
    /// Camera-to-scene rigid transform.
    pub fn camera_to_scene(&self) -> Mat4 {
        let rot = Mat4::rotation_y(self.azimuth_deg).mul(&Mat4::rotation_x(-self.elevation_deg));
        let pos = rot.apply([0.0, 0.0, self.distance]);
        Mat4::translation(pos).mul(&rot)
    }

    pub fn position(&self) -> [f64; 3] {
        self.camera_to_scene().apply([0.0; 3])
    }

    /// Scene-to-camera rigid transform.
    pub fn scene_to_camera(&self) -> Mat4 {
        self.camera_to_scene().inverse().expect("rigid transforms are invertible")
    }
}

/// Corner `i` has x sign from bit 0, y sign from bit 1, and lies on the far
/// plane when bit 2 is set.
fn corner_signs(i: usize) -> (f64, f64, bool) {
    let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
    let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
    (sx, sy, i & 4 != 0)
}

/// Corners of the camera feature cube, ordered like [`frustum_corners`].
pub fn cube_corners() -> [[f64; 3]; 8] {
    std::array::from_fn(|i| {
        let (sx, sy, far) = corner_signs(i);
        [sx, sy, if far { 1.0 } else { -1.0 }]
    })
}

/// Scene-space corners of the viewing frustum between the near and far planes.
pub fn frustum_corners(intrinsics: &CameraIntrinsics, camera: &CameraPose) -> Result<[[f64; 3]; 8]> {
    intrinsics.validate()?;
    if intrinsics.mode != ProjectionMode::Perspective {
        return Err(Error::invalid(
            "frustum_corners",
            "weak-perspective cameras have a box-shaped viewing volume",
        ));
    }
    let tan = intrinsics.half_tan();
    let to_scene = camera.camera_to_scene();
    Ok(std::array::from_fn(|i| {
        let (sx, sy, far) = corner_signs(i);
        let depth = if far { intrinsics.far } else { intrinsics.near };
        to_scene.apply([sx * depth * tan, sy * depth * tan, -depth])
    }))
}

/// Similarity moving `points` to centroid zero and RMS distance `sqrt(3)`.
fn conditioning(points: &[[f64; 3]]) -> Mat4 {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a] / n;
        }
    }
    let rms = (points
        .iter()
        .map(|p| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n)
        .sqrt();
    let s = if rms > 0.0 { 3f64.sqrt() / rms } else { 1.0 };
    Mat4::scaling([s; 3]).mul(&Mat4::translation(c.map(|v| -v)))
}

/// Direct linear transform: the projective `M` (unit Frobenius norm, last
/// nonzero entry positive) minimizing the algebraic error of `dst_i ~ M src_i`.
pub fn dlt_projective(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Mat4> {
    if src.len() != dst.len() || src.len() < 5 {
        return Err(Error::invalid(
            "dlt_projective",
            format!("need >= 5 matched points, got {} / {}", src.len(), dst.len()),
        ));
    }
    let ts = conditioning(src);
    let td = conditioning(dst);
    let rows = 3 * src.len();
    let mut a = DMatrix::<f64>::zeros(rows, 16);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let x = ts.apply(*s);
        let y = td.apply(*d);
        let xh = [x[0], x[1], x[2], 1.0];
        // y_r * (m_4 . x) - (m_r . x) = 0 for r in 0..3
        for r in 0..3 {
            let row = 3 * i + r;
            for k in 0..4 {
                a[(row, 4 * r + k)] = -xh[k];
                a[(row, 12 + k)] = y[r] * xh[k];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second, largest) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[order.len() - 1]],
    );
    if second <= 1e-9 * largest {
        return Err(Error::Singular(format!(
            "point configuration is degenerate (singular values {smallest:.3e}, {second:.3e})"
        )));
    }
    let v = vt.row(order[0]);
    let mut m = [[0.0; 4]; 4];
    for r in 0..4 {
        for k in 0..4 {
            m[r][k] = v[4 * r + k];
        }
    }
    let conditioned = Mat4(m);
    let full = td.inverse()?.mul(&conditioned).mul(&ts);
    Ok(full.normalized())
}

/// Scene-space to camera-cube transform for the given camera.
pub fn scene_to_camera_matrix(intrinsics: &CameraIntrinsics, camera: &CameraPose) -> Result<Mat4> {
    intrinsics.validate()?;
    match intrinsics.mode {
        ProjectionMode::Perspective => {
            let corners = frustum_corners(intrinsics, camera)?;
            dlt_projective(&corners, &cube_corners())
        }
        ProjectionMode::WeakPerspective => {
            // Orthographic box whose cross-section matches the frustum at mid-depth.
            let mid = 0.5 * (intrinsics.near + intrinsics.far);
            let half_width = mid * intrinsics.half_tan();
            let half_depth = 0.5 * (intrinsics.far - intrinsics.near);
            let to_cube = Mat4::scaling([1.0 / half_width, 1.0 / half_width, -1.0 / half_depth])
                .mul(&Mat4::translation([0.0, 0.0, mid]));
            Ok(to_cube.mul(&camera.scene_to_camera()))
        }
    }
}

/// Object canonical space straight to the camera cube: one combined matrix so
/// features are interpolated a single time.
pub fn fused_object_to_camera(
    object: &Pose,
    camera: &CameraPose,
    intrinsics: &CameraIntrinsics,
) -> Result<Mat4> {
    let obj = similarity_matrix(object)?;
    let cam = scene_to_camera_matrix(intrinsics, camera)?;
    Ok(cam.mul(&obj))
}

#[inline]
fn axis_coord(i: usize, len: usize) -> f64 {
    if len == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    }
}

/// Normalized position of voxel `(h, w, d)` in a grid of extents `dims = [H, W, D]`.
pub fn voxel_point(dims: [usize; 3], h: usize, w: usize, d: usize) -> [f64; 3] {
    [axis_coord(w, dims[1]), -axis_coord(h, dims[0]), axis_coord(d, dims[2])]
}

/// Fractional `(h, w, d)` index of a normalized point.
pub fn point_voxel(dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    let f = |c: f64, len: usize| (c + 1.0) * (len - 1) as f64 / 2.0;
    [f(-p[1], dims[0]), f(p[0], dims[1]), f(p[2], dims[2])]
}

const SNAP: f64 = 1e-9;

/// Backward-warp stencil: each output voxel maps through `transform^-1` into
/// the source grid; corners outside the grid get zero weight.
pub fn resample_taps(dims: [usize; 3], transform: &Mat4) -> Result<Taps> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::shape("resample_grid", format!("grid extents {dims:?} must be >= 2")));
    }
    let inv = transform.inverse()?;
    let [hn, wn, dn] = dims;
    let voxels = hn * wn * dn;
    let mut index = Vec::with_capacity(voxels);
    let mut weight = Vec::with_capacity(voxels);
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let q = inv.apply_h(voxel_point(dims, h, w, d));
                let mut idx = [0u32; 8];
                let mut wt = [0.0f64; 8];
                if q[3].abs() > 1e-12 {
                    let p = [q[0] / q[3], q[1] / q[3], q[2] / q[3]];
                    let f = point_voxel(dims, p);
                    if f.iter().all(|v| v.is_finite()) {
                        let mut base = [0i64; 3];
                        let mut frac = [0.0; 3];
                        for a in 0..3 {
                            let mut fl = f[a].floor();
                            let mut fr = f[a] - fl;
                            if fr > 1.0 - SNAP {
                                fl += 1.0;
                                fr = 0.0;
                            } else if fr < SNAP {
                                fr = 0.0;
                            }
                            base[a] = fl as i64;
                            frac[a] = fr;
                        }
                        for k in 0..8 {
                            let mut wk = 1.0;
                            let mut pos = [0i64; 3];
                            for a in 0..3 {
                                let bit = (k >> (2 - a)) & 1;
                                pos[a] = base[a] + bit as i64;
                                wk *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                            }
                            let inside = (0..3).all(|a| pos[a] >= 0 && (pos[a] as usize) < dims[a]);
                            if inside && wk != 0.0 {
                                idx[k] = ((pos[0] as usize * wn + pos[1] as usize) * dn + pos[2] as usize) as u32;
                                wt[k] = wk;
                            }
                        }
                    }
                }
                index.push(idx);
                weight.push(wt);
            }
        }
    }
    Ok(Taps { index, weight })
}

/// Resample a `[H, W, D, C]` or `[1, H, W, D, C]` grid under `transform`.
pub fn resample_grid<T: Real>(features: &Tensor<T>, transform: &Mat4) -> Result<Tensor<T>> {
    let s = features.shape();
    let (dims, c) = match s.len() {
        4 => ([s[0], s[1], s[2]], s[3]),
        5 if s[0] == 1 => ([s[1], s[2], s[3]], s[4]),
        _ => return Err(Error::shape("resample_grid", format!("features {s:?}"))),
    };
    let taps = resample_taps(dims, transform)?;
    let src = features.data();
    let mut out = vec![T::zero(); src.len()];
    for (v, (idx, w)) in taps.index.iter().zip(&taps.weight).enumerate() {
        for k in 0..8 {
            if w[k] == 0.0 {
                continue;
            }
            let wk = T::from_f64(w[k]);
            let base = idx[k] as usize * c;
            for ch in 0..c {
                out[v * c + ch] += wk * src[base + ch];
            }
        }
    }
    Tensor::new(s, out)
}
