//! Procedural articulated template ("capsule person"): a 16-joint skeleton,
//! closed capsule primitives per body segment, and distance-falloff skinning
//! weights.

use serde::{Deserialize, Serialize};

use avatar_tensor::Mat;

use super::BodyError;
use crate::geometry::Vec3;

pub const NUM_JOINTS: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine1",
    "spine2",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(2),
    Some(4),
    Some(5),
    Some(2),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Surface material of a face, used by the procedural texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Material {
    Skin = 0,
    Shirt = 1,
    Pants = 2,
    Shoes = 3,
}

/// Per-identity scale factors applied to the template before skinning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub height: f64,
    pub arm_length: f64,
    pub leg_length: f64,
    pub girth: f64,
    pub shoulder_width: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self { height: 1.0, arm_length: 1.0, leg_length: 1.0, girth: 1.0, shoulder_width: 1.0 }
    }
}

impl ShapeParams {
    pub const LEN: usize = 5;

    pub fn to_array(&self) -> [f64; Self::LEN] {
        [self.height, self.arm_length, self.leg_length, self.girth, self.shoulder_width]
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        match v {
            [height, arm_length, leg_length, girth, shoulder_width] => Some(Self {
                height: *height,
                arm_length: *arm_length,
                leg_length: *leg_length,
                girth: *girth,
                shoulder_width: *shoulder_width,
            }),
            _ => None,
        }
    }
}

/// Joint hierarchy with rest positions. Rest orientations are identity, so a
/// joint's rest transform is a pure translation to its position.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<Option<usize>>,
    pub rest_joints: Vec<Vec3>,
}

impl Skeleton {
    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }
}

#[derive(Clone, Debug)]
pub struct BodyTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub face_materials: Vec<Material>,
    pub skeleton: Skeleton,
    /// `V x K` skinning weights; rows are convex combinations.
    pub weights: Mat,
}

impl BodyTemplate {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        face_materials: Vec<Material>,
        skeleton: Skeleton,
        weights: Mat,
    ) -> Result<Self, BodyError> {
        let k = skeleton.num_joints();
        if k == 0 || skeleton.rest_joints.len() != k {
            return Err(BodyError::InvalidTemplate("skeleton needs at least one joint with a rest position each".into()));
        }
        for (j, p) in skeleton.parents.iter().enumerate() {
            if p.is_some_and(|p| p >= j) {
                return Err(BodyError::InvalidTemplate(format!("joint {j} must come after its parent")));
            }
        }
        if weights.shape() != (vertices.len(), k) {
            return Err(BodyError::InvalidTemplate(format!(
                "weights are {:?}, expected {}x{k}",
                weights.shape(),
                vertices.len()
            )));
        }
        for v in 0..vertices.len() {
            let row = weights.row(v);
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(BodyError::InvalidTemplate(format!("skinning weights of vertex {v} are not a convex combination")));
            }
        }
        for (f, t) in faces.iter().enumerate() {
            if t.iter().any(|&i| i >= vertices.len()) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(BodyError::InvalidTemplate(format!("face {f} must reference 3 distinct vertices")));
            }
        }
        if face_materials.len() != faces.len() {
            return Err(BodyError::InvalidTemplate("one material per face required".into()));
        }
        Ok(Self { vertices, faces, face_materials, skeleton, weights })
    }

    pub fn num_joints(&self) -> usize {
        self.skeleton.num_joints()
    }

    /// The procedural body for a given identity shape.
    pub fn capsule_person(shape: &ShapeParams) -> Self {
        let joints = joint_positions(shape);
        let g = shape.girth;
        let mut mesh = MeshBuilder::default();
        let mirror = |v: Vec3, side: f64| Vec3::new(v.x * side, v.y, v.z);

        let pelvis = joints[0];
        let spine2 = joints[2];
        let head = joints[3];
        mesh.capsule(pelvis + Vec3::new(0.0, -0.08, 0.0), joints[1] + Vec3::new(0.0, 0.02, 0.0), 0.14 * g, 0.13 * g, 0.7, Material::Pants);
        mesh.capsule(joints[1], spine2 + Vec3::new(0.0, 0.06, 0.0), 0.14 * g, 0.16 * g, 0.65, Material::Shirt);
        mesh.capsule(head + Vec3::new(0.0, 0.07, 0.0), head + Vec3::new(0.0, 0.17, 0.0), 0.095 * g, 0.1 * g, 1.0, Material::Skin);
        for (side, (sh, el, wr, hip, kn, an)) in [(1.0, (4, 5, 6, 10, 11, 12)), (-1.0, (7, 8, 9, 13, 14, 15))] {
            let hand_dir = (joints[wr] - joints[el]).normalize();
            mesh.capsule(joints[sh], joints[el], 0.058 * g, 0.048 * g, 1.0, Material::Shirt);
            mesh.capsule(joints[el], joints[wr], 0.046 * g, 0.036 * g, 1.0, Material::Shirt);
            mesh.capsule(joints[wr] + hand_dir * 0.02, joints[wr] + hand_dir * 0.11, 0.035 * g, 0.03 * g, 0.6, Material::Skin);
            mesh.capsule(joints[hip], joints[kn], 0.082 * g, 0.062 * g, 1.0, Material::Pants);
            mesh.capsule(joints[kn], joints[an], 0.06 * g, 0.045 * g, 1.0, Material::Pants);
            let heel = joints[an] + mirror(Vec3::new(0.0, -0.04, -0.03), side);
            mesh.capsule(heel, heel + Vec3::new(0.0, -0.01, 0.16), 0.04 * g, 0.038 * g, 0.8, Material::Shoes);
        }

        let bones = bone_segments(&joints, shape);
        let weights = skinning_weights(&mesh.vertices, &bones);
        let skeleton = Skeleton { parents: PARENTS.to_vec(), rest_joints: joints.to_vec() };
        Self::new(mesh.vertices, mesh.faces, mesh.materials, skeleton, weights).expect("procedural template is valid")
    }
}

fn joint_positions(shape: &ShapeParams) -> [Vec3; NUM_JOINTS] {
    let (leg, arm, sw) = (shape.leg_length, shape.arm_length, shape.shoulder_width);
    let ankle_y = 0.09;
    let knee_y = ankle_y + 0.41 * leg;
    let hip_y = knee_y + 0.41 * leg;
    let pelvis = Vec3::new(0.0, hip_y + 0.06, 0.0);
    let spine1 = pelvis + Vec3::new(0.0, 0.18, 0.0);
    let spine2 = spine1 + Vec3::new(0.0, 0.2, 0.0);
    let head = spine2 + Vec3::new(0.0, 0.18, 0.0);
    let mut j = [Vec3::zeros(); NUM_JOINTS];
    j[0] = pelvis;
    j[1] = spine1;
    j[2] = spine2;
    j[3] = head;
    for (side, (sh, el, wr, hip, kn, an)) in [(1.0, (4, 5, 6, 10, 11, 12)), (-1.0, (7, 8, 9, 13, 14, 15))] {
        j[sh] = spine2 + Vec3::new(side * 0.19 * sw, 0.09, 0.0);
        j[el] = j[sh] + Vec3::new(side * 0.27 * arm, 0.0, 0.0);
        j[wr] = j[el] + Vec3::new(side * 0.24 * arm, 0.0, 0.0);
        j[hip] = Vec3::new(side * 0.095 * shape.girth, hip_y, 0.0);
        j[kn] = Vec3::new(side * 0.095 * shape.girth, knee_y, 0.0);
        j[an] = Vec3::new(side * 0.095 * shape.girth, ankle_y, 0.0);
    }
    for p in &mut j {
        *p *= shape.height;
    }
    j
}

/// One bone segment per joint: from the joint to its main child, or a short
/// stub for end joints.
fn bone_segments(j: &[Vec3; NUM_JOINTS], shape: &ShapeParams) -> Vec<(Vec3, Vec3)> {
    let h = shape.height;
    let stub = |a: usize, b: usize, len: f64| (j[b], j[b] + (j[b] - j[a]).normalize() * len);
    vec![
        (j[0] + Vec3::new(0.0, -0.06 * h, 0.0), j[1]),
        (j[1], j[2]),
        (j[2], j[3]),
        (j[3], j[3] + Vec3::new(0.0, 0.22 * h, 0.0)),
        (j[4], j[5]),
        (j[5], j[6]),
        stub(5, 6, 0.12 * h),
        (j[7], j[8]),
        (j[8], j[9]),
        stub(8, 9, 0.12 * h),
        (j[10], j[11]),
        (j[11], j[12]),
        (j[12], j[12] + Vec3::new(0.0, -0.05, 0.15) * h),
        (j[13], j[14]),
        (j[14], j[15]),
        (j[15], j[15] + Vec3::new(0.0, -0.05, 0.15) * h),
    ]
}

pub(crate) fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-18)).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Inverse-distance falloff `d^-SKIN_POWER` to every bone, truncated to the 3
/// nearest bones and normalized per vertex.
const SKIN_POWER: i32 = 4;

fn skinning_weights(vertices: &[Vec3], bones: &[(Vec3, Vec3)]) -> Mat {
    let k = bones.len();
    let mut w = Mat::zeros(vertices.len(), k);
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(k);
    for (v, p) in vertices.iter().enumerate() {
        scored.clear();
        scored.extend(bones.iter().enumerate().map(|(b, (s, e))| (b, point_segment_distance(p, s, e).max(1e-3).powi(-SKIN_POWER))));
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let total: f64 = scored[..3.min(k)].iter().map(|s| s.1).sum();
        for &(b, s) in &scored[..3.min(k)] {
            w.set(v, b, s / total);
        }
    }
    w
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    materials: Vec<Material>,
}

const CAPSULE_SEGMENTS: usize = 8;

impl MeshBuilder {
    /// Closed capsule from `a` to `b` with end radii `ra`, `rb`. `depth`
    /// squashes the cross-section along the world z axis (chest, pelvis).
    /// Faces are wound counter-clockwise seen from outside.
    fn capsule(&mut self, a: Vec3, b: Vec3, ra: f64, rb: f64, depth: f64, material: Material) {
        let axis = (b - a).normalize();
        let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = axis.cross(&helper).normalize();
        let e2 = axis.cross(&e1);
        // (center, radius, axial offset) per ring, bottom to top.
        let mut rings: Vec<(Vec3, f64, f64)> = Vec::new();
        for lat in [-60.0f64, -30.0] {
            let (s, c) = lat.to_radians().sin_cos();
            rings.push((a, ra * c, ra * s));
        }
        for t in [0.0, 0.5, 1.0] {
            rings.push((a + (b - a) * t, ra + (rb - ra) * t, 0.0));
        }
        for lat in [30.0f64, 60.0] {
            let (s, c) = lat.to_radians().sin_cos();
            rings.push((b, rb * c, rb * s));
        }
        let squash = |v: Vec3, center: Vec3| {
            let d = v - center;
            center + Vec3::new(d.x, d.y, d.z * depth)
        };
        let bottom = self.vertices.len();
        self.vertices.push(squash(a - axis * ra, a));
        let ring_start = self.vertices.len();
        for (center, r, off) in &rings {
            for j in 0..CAPSULE_SEGMENTS {
                let phi = std::f64::consts::TAU * j as f64 / CAPSULE_SEGMENTS as f64;
                let p = center + axis * *off + (e1 * phi.cos() + e2 * phi.sin()) * *r;
                self.vertices.push(squash(p, *center));
            }
        }
        let top = self.vertices.len();
        self.vertices.push(squash(b + axis * rb, b));
        let idx = |ring: usize, j: usize| ring_start + ring * CAPSULE_SEGMENTS + j % CAPSULE_SEGMENTS;
        let n = rings.len();
        for j in 0..CAPSULE_SEGMENTS {
            self.faces.push([bottom, idx(0, j + 1), idx(0, j)]);
            for i in 0..n - 1 {
                self.faces.push([idx(i, j), idx(i, j + 1), idx(i + 1, j)]);
                self.faces.push([idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j)]);
            }
            self.faces.push([idx(n - 1, j), idx(n - 1, j + 1), top]);
        }
        let added = self.faces.len() - self.materials.len();
        self.materials.extend(std::iter::repeat_n(material, added));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_person_shape() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        assert_eq!(t.num_joints(), 16);
        assert!((700..1000).contains(&t.vertices.len()), "{} vertices", t.vertices.len());
        assert_eq!(t.faces.len(), t.face_materials.len());
        for v in 0..t.vertices.len() {
            let s: f64 = t.weights.row(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(t.weights.row(v).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn faces_point_outward() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        // Every capsule is convex: face normals point away from the mean of
        // that capsule's vertices. Capsules are contiguous 58-vertex blocks.
        let per = 2 + 7 * CAPSULE_SEGMENTS;
        for f in &t.faces {
            let block = f[0] / per;
            let centroid: Vec3 = t.vertices[block * per..(block + 1) * per].iter().sum::<Vec3>() / per as f64;
            let (a, b, c) = (t.vertices[f[0]], t.vertices[f[1]], t.vertices[f[2]]);
            let n = (b - a).cross(&(c - a));
            assert!(n.dot(&((a + b + c) / 3.0 - centroid)) > 0.0);
        }
    }

    #[test]
    fn shape_scales_change_height() {
        let tall = BodyTemplate::capsule_person(&ShapeParams { height: 1.1, ..Default::default() });
        let base = BodyTemplate::capsule_person(&ShapeParams::default());
        let top = |t: &BodyTemplate| t.vertices.iter().map(|v| v.y).fold(f64::MIN, f64::max);
        assert!(top(&tall) > top(&base) * 1.05);
    }

    #[test]
    fn rejects_bad_weights() {
        let sk = Skeleton { parents: vec![None, Some(0)], rest_joints: vec![Vec3::zeros(), Vec3::y()] };
        let verts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let w = Mat::from_vec(3, 2, vec![0.5, 0.5, 1.0, 0.0, 0.7, 0.7]);
        assert!(BodyTemplate::new(verts.clone(), vec![[0, 1, 2]], vec![Material::Skin], sk.clone(), w).is_err());
        let w = Mat::from_vec(3, 2, vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0]);
        assert!(BodyTemplate::new(verts.clone(), vec![[0, 1, 1]], vec![Material::Skin], sk.clone(), w.clone()).is_err());
        assert!(BodyTemplate::new(verts, vec![[0, 1, 2]], vec![Material::Skin], sk, w).is_ok());
    }
}
