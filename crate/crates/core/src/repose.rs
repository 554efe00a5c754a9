//! Mapping between a target pose and the reference (observed) pose through
//! the canonical template: inverse skinning with weights taken from the
//! nearest target-posed surface, then forward skinning with weights taken
//! from the nearest canonical surface.

use std::sync::Arc;

use thiserror::Error;

use crate::body::{blend_transforms, interpolate_attribute, BodyError, BodyPose, BodyTemplate, PosedBody, TriMesh};
use crate::geometry::{Mat3, Vec3};

/// Blended transforms with a worse condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReposeError {
    #[error("blended skinning transform is near-singular (condition number {0:.3e})")]
    DegenerateWeights(f64),
    #[error(transparent)]
    Body(#[from] BodyError),
}

/// A deformed query: reference-space point and direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformed {
    pub point: Vec3,
    pub dir: Vec3,
}

#[derive(Clone, Debug)]
pub struct DeformationContext {
    pub template: Arc<BodyTemplate>,
    pub canonical: TriMesh,
    pub reference: PosedBody,
    pub target: PosedBody,
    /// Target pose equals the reference pose: every map is the identity.
    pub identity: bool,
}

fn condition_number(a: &Mat3) -> f64 {
    let sv = a.svd(false, false).singular_values;
    let (mx, mn) = (sv.max(), sv.min());
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

impl DeformationContext {
    pub fn new(template: Arc<BodyTemplate>, reference: &BodyPose, target: &BodyPose) -> Result<Self, ReposeError> {
        let faces = Arc::new(template.faces.clone());
        let canonical = TriMesh::new(template.vertices.clone(), faces.clone());
        let reference_body = PosedBody::new(&template, &faces, reference)?;
        let target_body = PosedBody::new(&template, &faces, target)?;
        Ok(Self { identity: reference == target, template, canonical, reference: reference_body, target: target_body })
    }

    /// Builds the context from already posed bodies sharing `template`.
    pub fn from_bodies(template: Arc<BodyTemplate>, reference: PosedBody, target: PosedBody) -> Self {
        let canonical = TriMesh::new(template.vertices.clone(), reference.mesh.faces.clone());
        Self { identity: reference.pose == target.pose, template, canonical, reference, target }
    }

    fn weights_near(&self, mesh: &TriMesh, x: &Vec3) -> Vec<f64> {
        let q = mesh.nearest_surface(x);
        interpolate_attribute(&q, &mesh.faces, &self.template.weights)
    }

    /// Target-space point to canonical space. Also returns the linear part
    /// of the blended target transform.
    pub fn inverse_skin(&self, x: &Vec3) -> Result<(Vec3, Mat3), ReposeError> {
        let w = self.weights_near(&self.target.mesh, x);
        let (a, t) = blend_transforms(&w, &self.target.transforms);
        let cond = condition_number(&a);
        if !(cond <= MAX_CONDITION) {
            return Err(ReposeError::DegenerateWeights(cond));
        }
        let inv = a.try_inverse().ok_or(ReposeError::DegenerateWeights(f64::INFINITY))?;
        Ok((inv * (x - t), a))
    }

    /// Canonical point to reference space (standard forward skinning with
    /// the reference pose's transforms). Also returns the linear part.
    pub fn forward_skin(&self, x_can: &Vec3) -> (Vec3, Mat3) {
        let w = self.weights_near(&self.canonical, x_can);
        let (a, t) = blend_transforms(&w, &self.reference.transforms);
        (a * x_can + t, a)
    }

    /// Full target-to-reference map of a point and a unit direction,
    /// bypassing the identity short-circuit.
    pub fn deform_full(&self, x: &Vec3, d: &Vec3) -> Result<Deformed, ReposeError> {
        let (xc, a_tar) = self.inverse_skin(x)?;
        let (xr, a_ref) = self.forward_skin(&xc);
        let inv = a_tar.try_inverse().ok_or(ReposeError::DegenerateWeights(f64::INFINITY))?;
        Ok(Deformed { point: xr, dir: (a_ref * inv * d).normalize() })
    }

    pub fn deform(&self, x: &Vec3, d: &Vec3) -> Result<Deformed, ReposeError> {
        if self.identity {
            return Ok(Deformed { point: *x, dir: *d });
        }
        self.deform_full(x, d)
    }

    pub fn deform_direction(&self, d: &Vec3, x: &Vec3) -> Result<Vec3, ReposeError> {
        Ok(self.deform(x, d)?.dir)
    }

    /// Vertex positions in the target body's local frame, where the
    /// reference-view features are re-attached for animation.
    pub fn target_anchor_positions(&self) -> Vec<Vec3> {
        self.target.vertices().iter().map(|v| self.target.to_local(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{ShapeParams, NUM_JOINTS};
    use crate::geometry::axis_angle_to_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template() -> Arc<BodyTemplate> {
        Arc::new(BodyTemplate::capsule_person(&ShapeParams::default()))
    }

    fn random_pose(rng: &mut impl Rng, scale: f64) -> BodyPose {
        let mut p = BodyPose::rest(NUM_JOINTS);
        for r in p.rotations.iter_mut() {
            *r = Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale));
        }
        p.translation = Vec3::new(rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.3..0.3));
        p
    }

    #[test]
    fn canonical_target_is_identity() {
        let t = template();
        let rest = BodyPose::rest(NUM_JOINTS);
        let ctx = DeformationContext::new(t.clone(), &rest, &rest).unwrap();
        for v in t.vertices.iter().step_by(37) {
            let p = v + Vec3::new(0.01, -0.02, 0.015);
            let (xc, _) = ctx.inverse_skin(&p).unwrap();
            assert!((xc - p).norm() < 1e-12);
            assert!((ctx.forward_skin(&p).0 - p).norm() < 1e-12);
        }
    }

    #[test]
    fn single_bone_rigid_motion() {
        let t = template();
        let mut target = BodyPose::rest(NUM_JOINTS);
        target.rotations[0] = Vec3::new(0.0, 0.7, 0.2);
        target.translation = Vec3::new(0.2, 0.0, -0.1);
        let rest = BodyPose::rest(NUM_JOINTS);
        let ctx = DeformationContext::new(t.clone(), &target, &target).unwrap();
        let g = &ctx.target.transforms[0];
        let r = axis_angle_to_matrix(&target.rotations[0]);
        assert!((g.rotation - r).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = ctx.target.vertices()[rng.random_range(0..t.vertices.len())];
            let x = v + Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let (xc, _) = ctx.inverse_skin(&x).unwrap();
            let expect = r.transpose() * (x - g.translation);
            assert!((xc - expect).norm() < 1e-9);
            // Reference = target: the round trip is exact for a rigid motion.
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3).normalize();
            let out = ctx.deform_full(&x, &d).unwrap();
            assert!((out.point - x).norm() < 1e-9);
            assert!((out.dir - d).norm() < 1e-9);
        }
        // Rigidly rotated target against the rest reference: d' = R^T d, and
        // angles between co-located directions are preserved.
        let ctx = DeformationContext::new(t, &rest, &target).unwrap();
        let x = ctx.target.vertices()[100];
        let (d1, d2) = (Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.6, 0.8, 0.0));
        let e1 = ctx.deform_direction(&d1, &x).unwrap();
        let e2 = ctx.deform_direction(&d2, &x).unwrap();
        assert!((e1 - r.transpose() * d1).norm() < 1e-9);
        assert!((e1.dot(&e2) - d1.dot(&d2)).abs() < 1e-6);
        assert!((e1.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posed_vertices_invert_to_canonical_vertices() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random_pose(&mut rng, 0.5);
        let ctx = DeformationContext::new(t.clone(), &BodyPose::rest(NUM_JOINTS), &target).unwrap();
        for (i, v) in ctx.target.vertices().iter().enumerate().step_by(7) {
            let (xc, _) = ctx.inverse_skin(v).unwrap();
            assert!((xc - t.vertices[i]).norm() < 1e-6, "vertex {i}: {}", (xc - t.vertices[i]).norm());
        }
    }

    #[test]
    fn on_vertex_round_trip_under_random_poses() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let pose = random_pose(&mut rng, 0.4);
            let ctx = DeformationContext::new(t.clone(), &pose, &pose).unwrap();
            let diag = ctx.target.bbox().diagonal();
            for v in ctx.target.vertices().iter().step_by(11) {
                let out = ctx.deform_full(v, &Vec3::z()).unwrap();
                assert!((out.point - v).norm() < 1e-5 * diag);
                assert!((out.dir.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Near-surface round trip of the full composition (no short-circuit)
    /// with target == reference, on a dataset pose. Nearest-surface weights
    /// sampled in two spaces disagree around joints, so this is a regression
    /// bound on the distribution rather than a per-point guarantee.
    #[test]
    fn near_surface_round_trip_distribution() {
        let t = template();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = crate::data::MotionParams::from_seed(3).pose(12, 30);
        let ctx = DeformationContext::new(t.clone(), &pose, &pose).unwrap();
        let diag = ctx.target.bbox().diagonal();
        let mut errs = Vec::new();
        while errs.len() < 400 {
            let v = ctx.target.vertices()[rng.random_range(0..t.vertices.len())];
            let x = v + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.02 * diag;
            if ctx.target.mesh.nearest_surface(&x).distance > 0.02 * diag {
                continue;
            }
            errs.push((ctx.deform_full(&x, &Vec3::z()).unwrap().point - x).norm() / diag);
            // The deployed map is exact here.
            assert_eq!(ctx.deform(&x, &Vec3::z()).unwrap().point, x);
        }
        let within = errs.iter().filter(|&&e| e <= 1e-3).count();
        assert!(within as f64 >= 0.95 * errs.len() as f64, "{within}/400 within 1e-3 diag");
        assert!(errs.iter().cloned().fold(0.0, f64::max) < 2e-2);
    }

    #[test]
    fn identity_short_circuit_is_exact() {
        let t = template();
        let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(4), 0.3);
        let ctx = DeformationContext::new(t, &pose, &pose).unwrap();
        assert!(ctx.identity);
        let (x, d) = (Vec3::new(0.1, 0.9, 0.05), Vec3::new(0.0, 0.6, 0.8));
        assert_eq!(ctx.deform(&x, &d).unwrap(), Deformed { point: x, dir: d });
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let mut t = BodyTemplate::capsule_person(&ShapeParams::default());
        // Two bones with opposite rotations blended half-half collapse an axis.
        for v in 0..t.vertices.len() {
            let row = t.weights.row_mut(v);
            row.fill(0.0);
            row[1] = 0.5;
            row[0] = 0.5;
        }
        let t = Arc::new(t);
        let mut target = BodyPose::rest(NUM_JOINTS);
        target.rotations[0] = Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        target.rotations[1] = Vec3::new(0.0, -std::f64::consts::PI, 0.0);
        let ctx = DeformationContext::new(t.clone(), &BodyPose::rest(NUM_JOINTS), &target).unwrap();
        let x = ctx.target.vertices()[0];
        assert!(matches!(ctx.inverse_skin(&x), Err(ReposeError::DegenerateWeights(_))));
    }
}
