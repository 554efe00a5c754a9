//! Triangle meshes with a bounding-volume hierarchy for nearest-surface and
//! ray queries.

use std::sync::Arc;

use crate::geometry::{Aabb, Camera, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceQuery {
    /// Closest surface point.
    pub point: Vec3,
    pub face: usize,
    /// Barycentric coordinates with respect to the face's vertex order.
    pub bary: [f64; 3],
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum BvhNode {
    Inner { bbox: Aabb, left: u32, right: u32 },
    Leaf { bbox: Aabb, start: u32, count: u32 },
}

impl BvhNode {
    fn bbox(&self) -> &Aabb {
        match self {
            BvhNode::Inner { bbox, .. } | BvhNode::Leaf { bbox, .. } => bbox,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(vertices: &[Vec3], faces: &[[usize; 3]]) -> Self {
        let boxes: Vec<Aabb> = faces.iter().map(|f| Aabb::from_points(f.iter().map(|&i| &vertices[i]))).collect();
        let centroids: Vec<Vec3> = boxes.iter().map(Aabb::center).collect();
        let mut order: Vec<u32> = (0..faces.len() as u32).collect();
        let mut nodes = Vec::new();
        if !faces.is_empty() {
            build_node(&mut nodes, &mut order, 0, faces.len(), &boxes, &centroids);
        }
        Self { nodes, order }
    }

    /// Closest point among faces accepted by `closest` (a point-to-face
    /// routine returning `(distance², query)`).
    fn nearest(&self, x: &Vec3, mut face_query: impl FnMut(usize) -> (f64, SurfaceQuery)) -> Option<SurfaceQuery> {
        let mut best: Option<(f64, SurfaceQuery)> = None;
        let mut stack = Vec::with_capacity(64);
        if !self.nodes.is_empty() {
            stack.push(0u32);
        }
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            let bound = best.as_ref().map_or(f64::INFINITY, |b| b.0);
            if node.bbox().distance_sq(x) >= bound {
                continue;
            }
            match node {
                BvhNode::Leaf { start, count, .. } => {
                    for &f in &self.order[*start as usize..(*start + *count) as usize] {
                        let (d2, q) = face_query(f as usize);
                        if best.as_ref().is_none_or(|b| d2 < b.0) {
                            best = Some((d2, q));
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    let dl = self.nodes[*left as usize].bbox().distance_sq(x);
                    let dr = self.nodes[*right as usize].bbox().distance_sq(x);
                    // Visit the nearer child first (pushed last).
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.map(|b| b.1)
    }

    /// Calls `visit` for every face whose leaf box the segment
    /// `origin + t dir, t in [t0, t1]` touches; stops when `visit` returns true.
    fn any_along(&self, origin: &Vec3, dir: &Vec3, t0: f64, t1: f64, mut visit: impl FnMut(usize) -> bool) -> bool {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = Vec::with_capacity(64);
        if !self.nodes.is_empty() {
            stack.push(0u32);
        }
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if !slab_overlaps(node.bbox(), origin, &inv, t0, t1) {
                continue;
            }
            match node {
                BvhNode::Leaf { start, count, .. } => {
                    for &f in &self.order[*start as usize..(*start + *count) as usize] {
                        if visit(f as usize) {
                            return true;
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
        false
    }
}

fn build_node(nodes: &mut Vec<BvhNode>, order: &mut [u32], start: usize, end: usize, boxes: &[Aabb], centroids: &[Vec3]) -> u32 {
    let slice = &mut order[start..end];
    let bbox = slice
        .iter()
        .map(|&f| boxes[f as usize])
        .reduce(|a, b| Aabb { min: a.min.inf(&b.min), max: a.max.sup(&b.max) })
        .expect("non-empty node");
    let id = nodes.len() as u32;
    if slice.len() <= LEAF_SIZE {
        nodes.push(BvhNode::Leaf { bbox, start: start as u32, count: slice.len() as u32 });
        return id;
    }
    let cb = Aabb::from_points(slice.iter().map(|&f| &centroids[f as usize]));
    let ext = cb.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]));
    nodes.push(BvhNode::Leaf { bbox, start: 0, count: 0 });
    let left = build_node(nodes, order, start, start + mid, boxes, centroids);
    let right = build_node(nodes, order, start + mid, end, boxes, centroids);
    nodes[id as usize] = BvhNode::Inner { bbox, left, right };
    id
}

fn slab_overlaps(b: &Aabb, origin: &Vec3, inv: &Vec3, t0: f64, t1: f64) -> bool {
    let (mut lo, mut hi) = (t0, t1);
    for a in 0..3 {
        let ta = (b.min[a] - origin[a]) * inv[a];
        let tb = (b.max[a] - origin[a]) * inv[a];
        let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        // NaN arises for a zero direction component with the origin on a slab
        // plane; treat that axis as unconstrained.
        if ta.is_nan() || tb.is_nan() {
            continue;
        }
        lo = lo.max(ta);
        hi = hi.min(tb);
        if lo > hi {
            return false;
        }
    }
    true
}

/// Closest point on triangle `abc` to `p`, with barycentric coordinates.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Möller–Trumbore intersection; returns `(t, b1, b2)` with barycentrics
/// `(1 - b1 - b2, b1, b2)` for hits with `t > 0`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    (t > 0.0).then_some((t, u, v))
}

/// Indexed triangle mesh plus acceleration structures. Immutable once built.
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Arc<Vec<[usize; 3]>>,
    bvh: Bvh,
    vertex_faces: Vec<Vec<u32>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Arc<Vec<[usize; 3]>>) -> Self {
        let bvh = Bvh::build(&vertices, &faces);
        let mut vertex_faces = vec![Vec::new(); vertices.len()];
        for (f, tri) in faces.iter().enumerate() {
            for &v in tri {
                vertex_faces[v].push(f as u32);
            }
        }
        Self { vertices, faces, bvh, vertex_faces }
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    fn face_query(&self, x: &Vec3, f: usize) -> (f64, SurfaceQuery) {
        let [a, b, c] = self.faces[f];
        let (p, bary) = closest_point_on_triangle(x, &self.vertices[a], &self.vertices[b], &self.vertices[c]);
        let d2 = (p - x).norm_squared();
        (d2, SurfaceQuery { point: p, face: f, bary, distance: d2.sqrt() })
    }

    /// Closest surface point to `x`.
    pub fn nearest_surface(&self, x: &Vec3) -> SurfaceQuery {
        self.bvh.nearest(x, |f| self.face_query(x, f)).expect("mesh has at least one face")
    }

    /// Exhaustive scan over all faces; reference for [`TriMesh::nearest_surface`].
    pub fn nearest_surface_brute_force(&self, x: &Vec3) -> SurfaceQuery {
        (0..self.faces.len())
            .map(|f| self.face_query(x, f))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("mesh has at least one face")
            .1
    }

    /// First intersection of `ray` within its bounds: `(t, face, bary)`.
    pub fn first_hit(&self, ray: &Ray) -> Option<(f64, usize, [f64; 3])> {
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        let t_far = ray.t_far;
        // The BVH walk is unordered, so gather the closest hit over all
        // candidate leaves.
        self.bvh.any_along(&ray.origin, &ray.dir, ray.t_near, t_far, |f| {
            let [a, b, c] = self.faces[f];
            if let Some((t, u, v)) = ray_triangle(&ray.origin, &ray.dir, &self.vertices[a], &self.vertices[b], &self.vertices[c]) {
                if t >= ray.t_near && t <= t_far && best.is_none_or(|bb| t < bb.0) {
                    best = Some((t, f, [1.0 - u - v, u, v]));
                }
            }
            false
        });
        best
    }

    /// Whether any face not in `skip` intersects the open segment from
    /// `origin` along unit `dir` for `t in (0, t_max)`.
    pub fn occluded(&self, origin: &Vec3, dir: &Vec3, t_max: f64, skip: &[u32]) -> bool {
        self.bvh.any_along(origin, dir, 0.0, t_max, |f| {
            if skip.contains(&(f as u32)) {
                return false;
            }
            let [a, b, c] = self.faces[f];
            ray_triangle(origin, dir, &self.vertices[a], &self.vertices[b], &self.vertices[c]).is_some_and(|(t, _, _)| t < t_max)
        })
    }

    /// Per-vertex 0/1 visibility from `cam`: the vertex projects inside the
    /// image and no face (other than those incident to it) lies on the
    /// camera-to-vertex segment closer than `depth_eps` to the vertex.
    pub fn vertex_visibility(&self, cam: &Camera, depth_eps: f64) -> Vec<f64> {
        let center = cam.center();
        self.vertices
            .iter()
            .enumerate()
            .map(|(v, x)| {
                let Some((u, vv, _)) = cam.project_with_depth(x) else { return 0.0 };
                if !cam.in_image(u, vv) {
                    return 0.0;
                }
                let to = x - center;
                let len = to.norm();
                if len <= depth_eps {
                    return 1.0;
                }
                let dir = to / len;
                if self.occluded(&center, &dir, len - depth_eps, &self.vertex_faces[v]) {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// The visibility depth epsilon used throughout: `1e-4` of the bbox diagonal.
    pub fn default_depth_eps(&self) -> f64 {
        1e-4 * self.bbox().diagonal()
    }

    pub fn incident_faces(&self, v: usize) -> &[u32] {
        &self.vertex_faces[v]
    }
}
