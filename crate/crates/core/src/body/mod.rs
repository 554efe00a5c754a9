//! Articulated template body: skeleton posing, linear blend skinning, and
//! surface queries (nearest point, visibility, bounding box) on posed meshes.

mod surface;
mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use avatar_tensor::Mat;

use crate::geometry::{axis_angle_to_matrix, Aabb, Mat3, Vec3};

pub use surface::{closest_point_on_triangle, ray_triangle, Bvh, SurfaceQuery, TriMesh};
pub use template::{BodyTemplate, Material, ShapeParams, Skeleton, JOINT_NAMES, NUM_JOINTS};

/// Bounding boxes of posed bodies are enlarged by this fraction per side.
pub const BBOX_ENLARGE: f64 = 0.025;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Mat3::identity()).abs().max()
    }
}

/// Per-joint local rotations (axis-angle, relative to the parent) and a root
/// translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    pub rotations: Vec<Vec3>,
    pub translation: Vec3,
}

impl BodyPose {
    pub fn rest(num_joints: usize) -> Self {
        Self { rotations: vec![Vec3::zeros(); num_joints], translation: Vec3::zeros() }
    }

    /// Part transforms `G_k` mapping canonical points rigidly attached to
    /// joint `k` into the posed space.
    pub fn part_transforms(&self, skeleton: &Skeleton) -> Result<Vec<RigidTransform>, BodyError> {
        let k = skeleton.num_joints();
        if self.rotations.len() != k {
            return Err(BodyError::InvalidPose(format!("pose has {} joint rotations, skeleton has {k}", self.rotations.len())));
        }
        if self.rotations.iter().chain([&self.translation]).any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(BodyError::InvalidPose("non-finite pose parameter".into()));
        }
        let mut global_rot = Vec::with_capacity(k);
        let mut posed_joint = Vec::with_capacity(k);
        for j in 0..k {
            let local = axis_angle_to_matrix(&self.rotations[j]);
            let rest = skeleton.rest_joints[j];
            match skeleton.parents[j] {
                None => {
                    global_rot.push(local);
                    posed_joint.push(rest + self.translation);
                }
                Some(p) => {
                    let rp: Mat3 = global_rot[p];
                    posed_joint.push(posed_joint[p] + rp * (rest - skeleton.rest_joints[p]));
                    global_rot.push(rp * local);
                }
            }
        }
        Ok((0..k)
            .map(|j| RigidTransform {
                rotation: global_rot[j],
                translation: posed_joint[j] - global_rot[j] * skeleton.rest_joints[j],
            })
            .collect())
    }
}

/// `Σ_k w_k G_k` as a 3x3 linear part and a translation.
pub fn blend_transforms(weights: &[f64], transforms: &[RigidTransform]) -> (Mat3, Vec3) {
    let mut a = Mat3::zeros();
    let mut t = Vec3::zeros();
    for (w, g) in weights.iter().zip(transforms) {
        if *w != 0.0 {
            a += g.rotation * *w;
            t += g.translation * *w;
        }
    }
    (a, t)
}

/// Forward linear blend skinning of every template vertex.
pub fn pose_vertices(template: &BodyTemplate, transforms: &[RigidTransform]) -> Vec<Vec3> {
    template
        .vertices
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let (a, t) = blend_transforms(template.weights.row(v), transforms);
            a * x + t
        })
        .collect()
}

/// A template in a specific pose with its surface acceleration structure.
#[derive(Clone, Debug)]
pub struct PosedBody {
    pub pose: BodyPose,
    pub transforms: Vec<RigidTransform>,
    pub mesh: TriMesh,
    /// Posed-space root joint frame: maps body-local coordinates to world.
    pub root_frame: RigidTransform,
}

impl PosedBody {
    pub fn new(template: &BodyTemplate, faces: &Arc<Vec<[usize; 3]>>, pose: &BodyPose) -> Result<Self, BodyError> {
        let transforms = pose.part_transforms(&template.skeleton)?;
        let vertices = pose_vertices(template, &transforms);
        let root = skeleton_root(&template.skeleton);
        let rest = template.skeleton.rest_joints[root];
        let root_frame = RigidTransform { rotation: transforms[root].rotation, translation: transforms[root].apply(&rest) };
        Ok(Self { pose: pose.clone(), transforms, mesh: TriMesh::new(vertices, faces.clone()), root_frame })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.mesh.vertices
    }

    pub fn to_local(&self, x: &Vec3) -> Vec3 {
        self.root_frame.rotation.transpose() * (x - self.root_frame.translation)
    }

    pub fn to_world(&self, x: &Vec3) -> Vec3 {
        self.root_frame.apply(x)
    }

    /// Enlarged world-space bounding box of the posed mesh.
    pub fn bbox(&self) -> Aabb {
        body_bbox(&self.mesh.vertices, BBOX_ENLARGE)
    }

    /// Enlarged bounding box in the body-local frame.
    pub fn local_bbox(&self) -> Aabb {
        let local: Vec<Vec3> = self.mesh.vertices.iter().map(|v| self.to_local(v)).collect();
        body_bbox(&local, BBOX_ENLARGE)
    }
}

fn skeleton_root(skeleton: &Skeleton) -> usize {
    skeleton.parents.iter().position(Option::is_none).unwrap_or(0)
}

/// Tight box with each side scaled by `1 + enlarge_fraction` about its center.
pub fn body_bbox(vertices: &[Vec3], enlarge_fraction: f64) -> Aabb {
    Aabb::from_points(vertices).enlarged(enlarge_fraction)
}

/// `b1 a1 + b2 a2 + b3 a3` over the query face's vertices, row-wise.
pub fn interpolate_attribute(q: &SurfaceQuery, faces: &[[usize; 3]], table: &Mat) -> Vec<f64> {
    let f = faces[q.face];
    let mut out = vec![0.0; table.cols()];
    for (b, &v) in q.bary.iter().zip(&f) {
        for (o, a) in out.iter_mut().zip(table.row(v)) {
            *o += b * a;
        }
    }
    out
}

/// Scalar version of [`interpolate_attribute`].
pub fn interpolate_scalar(q: &SurfaceQuery, faces: &[[usize; 3]], values: &[f64]) -> f64 {
    let f = faces[q.face];
    q.bary[0] * values[f[0]] + q.bary[1] * values[f[1]] + q.bary[2] * values[f[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_bone_template(weights: Vec<f64>, verts: Vec<Vec3>) -> BodyTemplate {
        let n = verts.len();
        let sk = Skeleton { parents: vec![None, Some(0)], rest_joints: vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)] };
        let faces = vec![[0, 1, 2]];
        BodyTemplate::new(verts, faces, vec![Material::Skin], sk, Mat::from_vec(n, 2, weights)).unwrap()
    }

    #[test]
    fn identity_pose_is_identity() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        let g = BodyPose::rest(t.num_joints()).part_transforms(&t.skeleton).unwrap();
        let posed = pose_vertices(&t, &g);
        let max = posed.iter().zip(&t.vertices).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(max < 1e-9);
    }

    #[test]
    fn single_bone_rotation() {
        let sk = Skeleton { parents: vec![None], rest_joints: vec![Vec3::zeros()] };
        let verts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
        let t = BodyTemplate::new(verts, vec![[0, 1, 2]], vec![Material::Skin], sk, Mat::full(3, 1, 1.0)).unwrap();
        let pose = BodyPose { rotations: vec![Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)], translation: Vec3::zeros() };
        let posed = pose_vertices(&t, &pose.part_transforms(&t.skeleton).unwrap());
        assert!((posed[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn convex_blend_of_two_transforms() {
        let t = two_bone_template(
            vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0],
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
        );
        let g = [RigidTransform::identity(), RigidTransform { rotation: Mat3::identity(), translation: Vec3::new(0.0, 0.0, 1.0) }];
        let posed = pose_vertices(&t, &g);
        assert!((posed[0] - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn part_transforms_are_rigid_and_chain() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        let mut pose = BodyPose::rest(16);
        pose.rotations[0] = Vec3::new(0.0, 0.7, 0.0);
        pose.rotations[4] = Vec3::new(0.0, 0.0, -1.2);
        pose.rotations[5] = Vec3::new(0.0, -0.8, 0.0);
        pose.translation = Vec3::new(0.1, 0.0, -0.2);
        let g = pose.part_transforms(&t.skeleton).unwrap();
        for gk in &g {
            assert!(gk.orthonormality_error() < 1e-9);
        }
        // Child joints stay attached: the elbow moves with both the shoulder
        // and the elbow transform.
        let elbow = t.skeleton.rest_joints[5];
        assert!((g[4].apply(&elbow) - g[5].apply(&elbow)).norm() < 1e-12);
    }

    #[test]
    fn wrong_joint_count_is_rejected() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        assert!(BodyPose::rest(3).part_transforms(&t.skeleton).is_err());
    }

    #[test]
    fn bbox_of_unit_cube() {
        let cube: Vec<Vec3> = Aabb { min: Vec3::zeros(), max: Vec3::repeat(1.0) }.corners().to_vec();
        let b = body_bbox(&cube, 0.0);
        assert_eq!(b.min, Vec3::zeros());
        assert_eq!(b.max, Vec3::repeat(1.0));
        let b = body_bbox(&cube, 0.025);
        assert!((b.extent() - Vec3::repeat(1.025)).norm() < 1e-12);
        assert!((b.center() - Vec3::repeat(0.5)).norm() < 1e-12);
        assert!(cube.iter().all(|p| b.contains(p)));
    }

    #[test]
    fn interpolation_examples() {
        let faces = [[0usize, 1, 2]];
        let q = SurfaceQuery { point: Vec3::zeros(), face: 0, bary: [0.5, 0.25, 0.25], distance: 0.0 };
        assert_eq!(interpolate_scalar(&q, &faces, &[1.0, 1.0, 1.0]), 1.0);
        assert_eq!(interpolate_scalar(&q, &faces, &[1.0, 0.0, 0.0]), 0.5);
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        let q = SurfaceQuery { point: Vec3::zeros(), face: 100, bary: [0.2, 0.3, 0.5], distance: 0.0 };
        let w = interpolate_attribute(&q, &t.faces, &t.weights);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn body_local_frame_follows_root() {
        let t = BodyTemplate::capsule_person(&ShapeParams::default());
        let faces = Arc::new(t.faces.clone());
        let rest = PosedBody::new(&t, &faces, &BodyPose::rest(16)).unwrap();
        let mut pose = BodyPose::rest(16);
        pose.rotations[0] = Vec3::new(0.0, 1.1, 0.0);
        pose.translation = Vec3::new(0.3, 0.0, 0.2);
        let moved = PosedBody::new(&t, &faces, &pose).unwrap();
        for v in (0..t.vertices.len()).step_by(37) {
            // Every part is below the root in the chain, so with only a root
            // motion the local coordinates are unchanged.
            let a = rest.to_local(&rest.vertices()[v]);
            let b = moved.to_local(&moved.vertices()[v]);
            assert!((a - b).norm() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn interpolated_unit_field_stays_in_unit_interval(
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
            u in 0.0f64..1.0, v in 0.0f64..1.0,
        ) {
            let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
            let q = SurfaceQuery { point: Vec3::zeros(), face: 0, bary: [1.0 - u - v, u, v], distance: 0.0 };
            let x = interpolate_scalar(&q, &[[0, 1, 2]], &[a, b, c]);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
        }
    }
}
