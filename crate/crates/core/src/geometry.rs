//! Pinhole cameras, rays, axis-aligned boxes, bilinear grid sampling and
//! positional encoding.
//!
//! Conventions: world and camera frames are right-handed; the camera looks
//! along its `+z` axis with `+x` right and `+y` down. Pixel coordinates are
//! continuous with the origin at the top-left pixel center, so pixel `(i, j)`
//! is centered at `u = i, v = j`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use avatar_tensor::Mat;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (camera-frame z = {0})")]
    OutOfFrustum(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("focal lengths must be positive, got {} {}", intrinsics.fx, intrinsics.fy)));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        let err = (rotation * rotation.transpose() - Mat3::identity()).abs().max();
        if err > 1e-6 || rotation.determinant() < 0.0 {
            return Err(GeometryError::InvalidCamera(format!("rotation is not orthonormal (error {err:e})")));
        }
        Ok(Self { intrinsics, rotation, translation, width, height })
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics, width: usize, height: usize) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera("view direction parallel to up vector".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation, width, height)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Pinhole projection `u = fx x/z + cx`, `v = fy y/z + cy`.
    pub fn project(&self, x: &Vec3) -> Result<(f64, f64), GeometryError> {
        let p = self.to_camera(x);
        if p.z <= 0.0 {
            return Err(GeometryError::OutOfFrustum(p.z));
        }
        let k = &self.intrinsics;
        Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
    }

    /// Projection plus camera-frame depth.
    pub fn project_with_depth(&self, x: &Vec3) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(x);
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Ray from the camera center through continuous pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let dir = (self.rotation.transpose() * dir_cam).normalize();
        Ray { origin: self.center(), dir, t_near: 0.0, t_far: f64::INFINITY }
    }

    pub fn intrinsics_matrix(&self) -> [[f64; 3]; 3] {
        let k = &self.intrinsics;
        [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]]
    }

    /// `[R | t]`, world to camera.
    pub fn extrinsics_matrix(&self) -> [[f64; 4]; 3] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
        ]
    }

    pub fn from_matrices(k: [[f64; 3]; 3], e: [[f64; 4]; 3], width: usize, height: usize) -> Result<Self, GeometryError> {
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidCamera("intrinsics must be skew-free with last row 0 0 1".into()));
        }
        let intrinsics = Intrinsics { fx: k[0][0], fy: k[1][1], cx: k[0][2], cy: k[1][2] };
        let rotation = Mat3::new(e[0][0], e[0][1], e[0][2], e[1][0], e[1][1], e[1][2], e[2][0], e[2][1], e[2][2]);
        let translation = Vec3::new(e[0][3], e[1][3], e[2][3]);
        Self::new(intrinsics, rotation, translation, width, height)
    }

    /// Applies a world-space rigid motion `x -> r x + t` to the camera, so that
    /// moved points project exactly where the originals did.
    pub fn rigidly_moved(&self, r: &Mat3, t: &Vec3) -> Camera {
        let rotation = self.rotation * r.transpose();
        let translation = self.translation - rotation * t;
        Camera { rotation, translation, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Panics on an empty iterator.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut it = points.into_iter();
        let first = *it.next().expect("Aabb::from_points needs at least one point");
        let (mut min, mut max) = (first, first);
        for p in it {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Each side length scaled by `1 + fraction` about the center.
    pub fn enlarged(&self, fraction: f64) -> Self {
        let c = self.center();
        let half = self.extent() * (0.5 * (1.0 + fraction));
        Self { min: c - half, max: c + half }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn distance_sq(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|a| {
                let d = (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]);
                d * d
            })
            .sum()
    }
}

/// Bilinear weights of the four lattice neighbours of `(u, v)` on an
/// `h x w` grid (row index `y * w + x`). `None` outside `[0, w-1] x [0, h-1]`.
pub fn bilinear_weights(h: usize, w: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

/// Samples a `(h*w) x C` feature grid at continuous pixel `(u, v)`; zero
/// vector outside the grid.
pub fn bilinear_sample(grid: &Mat, h: usize, w: usize, u: f64, v: f64) -> Vec<f64> {
    assert_eq!(grid.rows(), h * w, "grid rows must equal h*w");
    let mut out = vec![0.0; grid.cols()];
    if let Some(taps) = bilinear_weights(h, w, u, v) {
        for (idx, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            for (o, g) in out.iter_mut().zip(grid.row(idx)) {
                *o += wt * g;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub octaves: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self { octaves: 4 }
    }
}

impl PosEncConfig {
    pub fn output_dim(&self) -> usize {
        6 * self.octaves
    }
}

/// Per octave `j`: `sin(2^j pi v)` for x,y,z followed by `cos(2^j pi v)`.
pub fn positional_encode(v: &Vec3, cfg: PosEncConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim());
    for j in 0..cfg.octaves {
        let f = std::f64::consts::PI * (1u64 << j) as f64;
        out.extend((0..3).map(|a| (f * v[a]).sin()));
        out.extend((0..3).map(|a| (f * v[a]).cos()));
    }
    out
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn axis_angle_to_matrix(aa: &Vec3) -> Mat3 {
    let angle = aa.norm();
    if angle < 1e-12 {
        return Mat3::identity();
    }
    nalgebra::Rotation3::from_scaled_axis(*aa).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_cam(fx: f64, c: f64, size: usize) -> Camera {
        Camera::new(Intrinsics { fx, fy: fx, cx: c, cy: c }, Mat3::identity(), Vec3::zeros(), size, size).unwrap()
    }

    #[test]
    fn project_on_axis() {
        let cam = identity_cam(1.0, 0.0, 4);
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn project_hand_evaluated() {
        let cam = identity_cam(100.0, 64.0, 128);
        let (u, v) = cam.project(&Vec3::new(0.1, 0.2, 1.0)).unwrap();
        assert!((u - 74.0).abs() < 1e-12 && (v - 84.0).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera_is_out_of_frustum() {
        let mut cam = identity_cam(100.0, 64.0, 128);
        cam.translation = Vec3::new(0.0, 0.0, -5.0);
        assert!(matches!(cam.project(&Vec3::new(0.0, 0.0, 1.0)), Err(GeometryError::OutOfFrustum(_))));
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = Camera::look_at(
            Vec3::new(3.0, 1.0, 0.5),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::y(),
            Intrinsics { fx: 150.0, fy: 150.0, cx: 64.0, cy: 64.0 },
            128,
            128,
        )
        .unwrap();
        let ray = cam.pixel_ray(64.0, 64.0);
        assert!((ray.dir - cam.forward()).norm() < 1e-12);
        assert!((ray.origin - Vec3::new(3.0, 1.0, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn off_axis_pixel_direction() {
        let cam = identity_cam(50.0, 32.0, 64);
        let d = cam.pixel_ray(32.0 + 50.0, 32.0).dir;
        let expect = Vec3::new(1.0, 0.0, 1.0).normalize();
        assert!((d - expect).norm() < 1e-12);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = Intrinsics { fx: -1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        assert!(Camera::new(k, Mat3::identity(), Vec3::zeros(), 4, 4).is_err());
        let k = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        assert!(Camera::new(k, Mat3::identity() * 2.0, Vec3::zeros(), 4, 4).is_err());
        assert!(Camera::new(k, Mat3::identity(), Vec3::zeros(), 0, 4).is_err());
    }

    #[test]
    fn matrices_round_trip() {
        let cam = Camera::look_at(
            Vec3::new(-2.0, 1.3, 2.0),
            Vec3::new(0.0, 0.9, 0.0),
            Vec3::y(),
            Intrinsics { fx: 170.0, fy: 171.0, cx: 63.5, cy: 64.5 },
            128,
            96,
        )
        .unwrap();
        let back = Camera::from_matrices(cam.intrinsics_matrix(), cam.extrinsics_matrix(), 128, 96).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn bilinear_lattice_and_midpoints() {
        let mut grid = Mat::zeros(6 * 4, 1);
        for i in 0..24 {
            grid.set(i, 0, i as f64);
        }
        assert_eq!(bilinear_sample(&grid, 6, 4, 3.0, 5.0), vec![grid.get(5 * 4 + 3, 0)]);
        let two = Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&two, 2, 2, 0.5, 0.0), vec![0.5]);
        assert_eq!(bilinear_sample(&two, 2, 2, 0.5, 0.5), vec![1.5]);
        assert_eq!(bilinear_sample(&two, 2, 2, 1.5, 0.5), vec![0.0]);
        assert_eq!(bilinear_sample(&two, 2, 2, -0.1, 0.5), vec![0.0]);
    }

    #[test]
    fn positional_encoding_cases() {
        let cfg = PosEncConfig { octaves: 3 };
        let z = positional_encode(&Vec3::zeros(), cfg);
        for j in 0..3 {
            assert!(z[6 * j..6 * j + 3].iter().all(|&s| s == 0.0));
            assert!(z[6 * j + 3..6 * j + 6].iter().all(|&c| c == 1.0));
        }
        let one = positional_encode(&Vec3::new(0.5, 0.0, 0.0), PosEncConfig { octaves: 1 });
        assert!((one[0] - 1.0).abs() < 1e-15);
        assert_eq!(positional_encode(&Vec3::new(0.3, 0.1, 0.2), PosEncConfig { octaves: 4 }).len(), 24);
    }

    fn random_camera() -> impl Strategy<Value = Camera> {
        (0.0..std::f64::consts::TAU, 1.5..4.0f64, -0.5..1.5f64, 80.0..300.0f64).prop_map(|(theta, radius, height, f)| {
            let eye = Vec3::new(radius * theta.cos(), height, radius * theta.sin());
            Camera::look_at(eye, Vec3::new(0.0, 0.8, 0.0), Vec3::y(), Intrinsics { fx: f, fy: f * 1.01, cx: 63.5, cy: 60.0 }, 128, 120)
                .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn projection_round_trip(cam in random_camera(), u in 0.0..127.0f64, v in 0.0..119.0f64, t in 0.1..10.0f64) {
            let ray = cam.pixel_ray(u, v);
            prop_assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
            let (pu, pv) = cam.project(&ray.point_at(t)).unwrap();
            prop_assert!((pu - u).abs() < 1e-4 && (pv - v).abs() < 1e-4);
        }

        #[test]
        fn bilinear_is_linear_in_grid(a in -3.0..3.0f64, b in -3.0..3.0f64, u in 0.0..4.0f64, v in 0.0..2.0f64,
                                      g1 in proptest::collection::vec(-1.0..1.0f64, 30),
                                      g2 in proptest::collection::vec(-1.0..1.0f64, 30)) {
            let m1 = Mat::from_vec(15, 2, g1);
            let m2 = Mat::from_vec(15, 2, g2);
            let combo = Mat::from_vec(15, 2, m1.data().iter().zip(m2.data()).map(|(x, y)| a * x + b * y).collect());
            let lhs = bilinear_sample(&combo, 3, 5, u, v);
            let s1 = bilinear_sample(&m1, 3, 5, u, v);
            let s2 = bilinear_sample(&m2, 3, 5, u, v);
            for c in 0..2 {
                prop_assert!((lhs[c] - (a * s1[c] + b * s2[c])).abs() < 1e-6);
            }
        }

        #[test]
        fn positional_encoding_bounded(x in -100.0..100.0f64, y in -100.0..100.0f64, z in -100.0..100.0f64, l in 1usize..8) {
            let e = positional_encode(&Vec3::new(x, y, z), PosEncConfig { octaves: l });
            prop_assert_eq!(e.len(), 6 * l);
            prop_assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
