//! Scene description for the synthetic captures: identity shape, procedural
//! texture palette, walking motion, camera ring, and lighting.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyPose, Material, ShapeParams, NUM_JOINTS};
use crate::geometry::{Camera, Intrinsics, Vec3};

use super::DataError;

/// Generator profile. `Shifted` changes the lighting and texture palette to
/// produce a cross-domain test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Default,
    Shifted,
}

impl Profile {
    pub fn lighting(self) -> Lighting {
        match self {
            Profile::Default => Lighting { ambient: 0.4, diffuse: 0.7, direction: Vec3::new(0.3, 0.8, 0.5).normalize() },
            Profile::Shifted => Lighting { ambient: 0.22, diffuse: 0.5, direction: Vec3::new(-0.5, 0.7, 0.3).normalize() },
        }
    }

    /// Salt mixed into seeds so the two profiles draw different people.
    fn salt(self) -> u64 {
        match self {
            Profile::Default => 0,
            Profile::Shifted => 0x5EED_0F_5B1F7,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Profile::Default),
            "shifted" => Ok(Profile::Shifted),
            other => Err(format!("unknown profile `{other}` (expected default or shifted)")),
        }
    }
}

/// Ambient plus one directional light; `direction` points towards the light.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub ambient: f64,
    pub diffuse: f64,
    pub direction: Vec3,
}

impl Lighting {
    pub fn shade(&self, albedo: [f64; 3], normal: &Vec3) -> [f64; 3] {
        let s = self.ambient + self.diffuse * normal.dot(&self.direction).max(0.0);
        albedo.map(|a| (a * s).clamp(0.0, 1.0))
    }
}

/// Procedural per-material colors evaluated at canonical surface positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [f64; 3],
    pub shirt: [[f64; 3]; 2],
    pub logo: [f64; 3],
    pub pants: [[f64; 3]; 2],
    pub shoes: [f64; 3],
    pub stripe_period: f64,
    pub checker_size: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Palette {
    pub fn from_seed(seed: u64, profile: Profile) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // The shifted profile rotates hues and desaturates.
        let (hue_shift, sat) = match profile {
            Profile::Default => (0.0, 1.0),
            Profile::Shifted => (0.35, 0.6),
        };
        let mut color = |s_lo: f64, s_hi: f64, v_lo: f64, v_hi: f64| {
            let h: f64 = rng.random_range(0.0..1.0);
            let s = rng.random_range(s_lo..s_hi) * sat;
            let v = rng.random_range(v_lo..v_hi);
            hsv(h + hue_shift, s, v)
        };
        let shirt = [color(0.5, 0.9, 0.6, 0.95), color(0.1, 0.5, 0.25, 0.6)];
        let logo = color(0.7, 1.0, 0.8, 1.0);
        let pants = [color(0.3, 0.8, 0.3, 0.7), color(0.2, 0.6, 0.5, 0.9)];
        let shoes = color(0.0, 0.4, 0.1, 0.3);
        let tone = rng.random_range(0.0..1.0);
        let skin = match profile {
            Profile::Default => [0.55 + 0.4 * tone, 0.4 + 0.35 * tone, 0.3 + 0.3 * tone],
            Profile::Shifted => [0.5 + 0.3 * tone, 0.42 + 0.3 * tone, 0.38 + 0.3 * tone],
        };
        Self {
            skin,
            shirt,
            logo,
            pants,
            shoes,
            stripe_period: rng.random_range(0.08..0.16),
            checker_size: rng.random_range(0.07..0.12),
        }
    }

    pub fn albedo(&self, material: Material, p: &Vec3, chest_height: f64) -> [f64; 3] {
        let mix = |a: [f64; 3], b: [f64; 3], t: f64| [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t);
        match material {
            Material::Skin => self.skin.map(|c| c * (0.95 + 0.05 * (p.y * 40.0).sin())),
            Material::Shirt => {
                if p.z > 0.0 && p.x * p.x + (p.y - chest_height).powi(2) < 0.07 * 0.07 {
                    return self.logo;
                }
                let t = 0.5 + 0.5 * (4.0 * (std::f64::consts::TAU * p.y / self.stripe_period).sin()).tanh();
                mix(self.shirt[0], self.shirt[1], t)
            }
            Material::Pants => {
                let k = std::f64::consts::PI / self.checker_size;
                let s = (k * p.x + 0.3).sin() * (k * p.y).sin() * (k * p.z + 0.7).sin();
                mix(self.pants[0], self.pants[1], 0.5 + 0.5 * (6.0 * s).tanh())
            }
            Material::Shoes => self.shoes,
        }
    }
}

/// Parameters of the per-identity walking motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub phase: f64,
    pub cycles: f64,
    pub hip_amp: f64,
    pub knee_amp: f64,
    pub arm_swing: f64,
    pub elbow_bend: f64,
    pub arm_lower: f64,
    pub arm_raise: f64,
    pub yaw0: f64,
    pub yaw_rate: f64,
}

impl MotionParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            cycles: rng.random_range(1.5..2.5),
            hip_amp: rng.random_range(0.3..0.5),
            knee_amp: rng.random_range(0.4..0.8),
            arm_swing: rng.random_range(0.3..0.6),
            elbow_bend: rng.random_range(0.2..0.6),
            arm_lower: rng.random_range(1.1..1.35),
            arm_raise: rng.random_range(0.4..0.8),
            yaw0: rng.random_range(0.0..std::f64::consts::TAU),
            yaw_rate: rng.random_range(-1.5..1.5),
        }
    }

    /// Pose at `frame` of a sequence of `frames`. Arms rise over the
    /// sequence so late frames contain poses absent from early ones.
    pub fn pose(&self, frame: usize, frames: usize) -> BodyPose {
        let s = frame as f64 / frames.max(1) as f64;
        let phi = self.phase + std::f64::consts::TAU * self.cycles * s;
        let (sp, cp) = phi.sin_cos();
        let mut r = vec![Vec3::zeros(); NUM_JOINTS];
        r[0] = Vec3::new(0.05 * cp, self.yaw0 + self.yaw_rate * s, 0.0);
        r[1] = Vec3::new(0.0, 0.12 * sp, 0.0);
        r[3] = Vec3::new(0.1 * (0.5 * phi).sin(), 0.0, 0.0);
        let lower = self.arm_lower - self.arm_raise * s * s;
        let arm = |swing: f64, lower: f64| (Rotation3::from_axis_angle(&Vec3::x_axis(), swing) * Rotation3::from_axis_angle(&Vec3::z_axis(), lower)).scaled_axis();
        r[4] = arm(self.arm_swing * sp, -lower);
        r[7] = arm(-self.arm_swing * sp, lower);
        r[5] = Vec3::new(0.0, -self.elbow_bend * (1.0 + 0.3 * sp), 0.0);
        r[8] = Vec3::new(0.0, self.elbow_bend * (1.0 - 0.3 * sp), 0.0);
        r[10] = Vec3::new(-self.hip_amp * sp, 0.0, 0.04);
        r[13] = Vec3::new(self.hip_amp * sp, 0.0, -0.04);
        r[11] = Vec3::new(self.knee_amp * (phi + 1.2).sin().max(0.0), 0.0, 0.0);
        r[14] = Vec3::new(self.knee_amp * (phi + 1.2 + std::f64::consts::PI).sin().max(0.0), 0.0, 0.0);
        r[12] = Vec3::new(0.15 * sp, 0.0, 0.0);
        r[15] = Vec3::new(-0.15 * sp, 0.0, 0.0);
        let translation = Vec3::new(0.06 * (0.5 * phi).sin(), 0.015 * (2.0 * phi).cos(), 0.06 * (0.5 * phi).cos());
        BodyPose { rotations: r, translation }
    }
}

pub fn sample_shape(seed: u64) -> ShapeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ShapeParams {
        height: rng.random_range(0.92..1.08),
        arm_length: rng.random_range(0.9..1.1),
        leg_length: rng.random_range(0.9..1.1),
        girth: rng.random_range(0.85..1.2),
        shoulder_width: rng.random_range(0.9..1.1),
    }
}

/// Ring of cameras around the origin looking at the body center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius: f64,
    pub camera_height: f64,
    pub target_height: f64,
    /// Focal length in units of image width.
    pub focal_scale: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self { cameras: 8, radius: 3.0, camera_height: 1.0, target_height: 0.95, focal_scale: 1.3, width: 128, height: 128 }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<Vec<Camera>, DataError> {
        if self.cameras < 4 {
            return Err(DataError::InvalidSpec(format!("camera ring needs at least 4 cameras, got {}", self.cameras)));
        }
        (0..self.cameras).map(|i| self.camera(std::f64::consts::TAU * i as f64 / self.cameras as f64)).collect()
    }

    /// Camera on the ring at azimuth `theta` (0 is in front of a body facing `+z`).
    pub fn camera(&self, theta: f64) -> Result<Camera, DataError> {
        let f = self.focal_scale * self.width as f64;
        let k = Intrinsics { fx: f, fy: f, cx: (self.width as f64 - 1.0) / 2.0, cy: (self.height as f64 - 1.0) / 2.0 };
        let eye = Vec3::new(self.radius * theta.sin(), self.camera_height, self.radius * theta.cos());
        Camera::look_at(eye, Vec3::new(0.0, self.target_height, 0.0), Vec3::y(), k, self.width, self.height)
            .map_err(|e| DataError::InvalidSpec(e.to_string()))
    }
}

/// Everything needed to render one identity's capture deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub identity_seed: u64,
    pub texture_seed: u64,
    pub shape: ShapeParams,
    pub palette: Palette,
    pub poses: Vec<BodyPose>,
    pub cameras: Vec<Camera>,
    pub lighting: Lighting,
    pub width: usize,
    pub height: usize,
}

impl SceneSpec {
    pub fn new(identity_seed: u64, texture_seed: u64, profile: Profile, rig: &RigConfig, frames: usize) -> Result<Self, DataError> {
        let cameras = rig.build()?;
        let motion = MotionParams::from_seed(identity_seed ^ 0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            identity_seed,
            texture_seed,
            shape: sample_shape(identity_seed),
            palette: Palette::from_seed(texture_seed, profile),
            poses: (0..frames).map(|f| motion.pose(f, frames)).collect(),
            cameras,
            lighting: profile.lighting(),
            width: rig.width,
            height: rig.height,
        })
    }
}

/// Seeds of identity `i` for a dataset seed and profile.
pub fn identity_seeds(dataset_seed: u64, profile: Profile, i: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed ^ profile.salt());
    rng.set_stream(i as u64 + 1);
    (rng.random(), rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_cameras_look_at_body() {
        let rig = RigConfig::default();
        let cams = rig.build().unwrap();
        assert_eq!(cams.len(), 8);
        for c in &cams {
            let (u, v) = c.project(&Vec3::new(0.0, rig.target_height, 0.0)).unwrap();
            assert!((u - 63.5).abs() < 1e-9 && (v - 63.5).abs() < 1e-9);
        }
        assert!(RigConfig { cameras: 3, ..rig }.build().is_err());
    }

    #[test]
    fn motion_is_deterministic_and_varies() {
        let m = MotionParams::from_seed(4);
        assert_eq!(m.pose(3, 30), MotionParams::from_seed(4).pose(3, 30));
        assert_ne!(m.pose(3, 30), m.pose(25, 30));
    }

    #[test]
    fn palettes_differ_between_profiles() {
        let a = Palette::from_seed(9, Profile::Default);
        let b = Palette::from_seed(9, Profile::Shifted);
        assert_ne!(a.shirt, b.shirt);
        assert!(Profile::Shifted.lighting().ambient < Profile::Default.lighting().ambient);
    }
}
