//! Z-buffered triangle rasterization and Lambertian shading of posed bodies.

use crate::body::{BodyTemplate, PosedBody};
use crate::geometry::{Camera, Vec3};
use crate::imaging::RgbImage;

use super::scene::SceneSpec;

/// Per-pixel visible surface: face index (`-1` for background),
/// perspective-correct barycentrics and camera depth.
#[derive(Clone, Debug)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub face: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn covered(&self) -> usize {
        self.face.iter().filter(|&&f| f >= 0).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.face.iter().map(|&f| f >= 0).collect()
    }
}

const NEAR: f64 = 1e-3;

/// Samples every pixel center; triangles with a vertex behind the near
/// plane are skipped (bodies are always fully in front of the rig).
pub fn rasterize(vertices: &[Vec3], faces: &[[usize; 3]], cam: &Camera) -> Fragments {
    let (w, h) = (cam.width, cam.height);
    let mut frags = Fragments { width: w, height: h, face: vec![-1; w * h], bary: vec![[0.0; 3]; w * h], depth: vec![f64::INFINITY; w * h] };
    let proj: Vec<Option<(f64, f64, f64)>> = vertices.iter().map(|v| cam.project_with_depth(v).filter(|p| p.2 > NEAR)).collect();
    for (f, tri) in faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (proj[tri[0]], proj[tri[1]], proj[tri[2]]) else { continue };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-14 {
            continue;
        }
        let x0 = a.0.min(b.0).min(c.0).ceil().max(0.0);
        let x1 = a.0.max(b.0).max(c.0).floor().min(w as f64 - 1.0);
        let y0 = a.1.min(b.1).min(c.1).ceil().max(0.0);
        let y1 = a.1.max(b.1).max(c.1).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let (px, py) = (x as f64, y as f64);
                let l0 = ((b.0 - px) * (c.1 - py) - (b.1 - py) * (c.0 - px)) / area;
                let l1 = ((c.0 - px) * (a.1 - py) - (c.1 - py) * (a.0 - px)) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let inv = [l0 / a.2, l1 / b.2, l2 / c.2];
                let s = inv[0] + inv[1] + inv[2];
                let z = 1.0 / s;
                let i = y * w + x;
                if z < frags.depth[i] {
                    frags.depth[i] = z;
                    frags.face[i] = f as i32;
                    frags.bary[i] = inv.map(|v| v / s);
                }
            }
        }
    }
    frags
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut n = vec![Vec3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        let fn_ = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        for v in [a, b, c] {
            n[v] += fn_;
        }
    }
    n.into_iter().map(|v| v.try_normalize(1e-15).unwrap_or_else(Vec3::y)).collect()
}

/// Rendered color image and binary coverage mask of one frame from one
/// camera.
pub fn render_ground_truth(spec: &SceneSpec, template: &BodyTemplate, body: &PosedBody, cam: &Camera) -> (RgbImage, Vec<bool>) {
    let frags = rasterize(body.vertices(), &template.faces, cam);
    let normals = vertex_normals(body.vertices(), &template.faces);
    let chest = template.skeleton.rest_joints[2].y;
    let mut img = RgbImage::new(cam.width, cam.height);
    for (i, &f) in frags.face.iter().enumerate() {
        if f < 0 {
            continue;
        }
        let f = f as usize;
        let [a, b, c] = template.faces[f];
        let bc = frags.bary[i];
        let canon = template.vertices[a] * bc[0] + template.vertices[b] * bc[1] + template.vertices[c] * bc[2];
        let n = (normals[a] * bc[0] + normals[b] * bc[1] + normals[c] * bc[2]).try_normalize(1e-15).unwrap_or_else(Vec3::y);
        let albedo = spec.palette.albedo(template.face_materials[f], &canon, chest);
        img.set(i % cam.width, i / cam.width, spec.lighting.shade(albedo, &n));
    }
    (img.quantized(), frags.mask())
}
