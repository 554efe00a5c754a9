//! Image encoder producing pixel-aligned feature maps at half resolution,
//! and projection-based feature lookup for 3D points.
//!
//! Feature coordinate convention: image pixel `(u, v)` maps to feature
//! coordinate `(u / 2, v / 2)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use avatar_tensor::{Mat, ParamId, ParamStore, Rulebook, SparseMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{bilinear_weights, Camera, Vec3};
use crate::imaging::RgbImage;
use crate::nn::{Ctx, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the stride-2 conv blocks.
    pub block_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { block_channels: vec![16, 32, 64, 64] }
    }
}

/// `(h*w) x C` feature grid bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

struct Plan {
    convs: Vec<Arc<Rulebook>>,
    upsample: Vec<Arc<SparseMap>>,
    out: (usize, usize),
}

pub struct Backbone {
    convs: Vec<(ParamId, ParamId)>,
    laterals: Vec<Linear>,
    plans: Mutex<HashMap<(usize, usize), Arc<Plan>>>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("blocks", &self.convs.len()).finish()
    }
}

/// Bilinear resampling from an `sh x sw` grid onto an `h x w` grid where
/// target index `q` reads source coordinate `q * scale`, clamped to the grid.
fn resample_map(sh: usize, sw: usize, h: usize, w: usize, scale: f64) -> SparseMap {
    let mut b = SparseMap::builder(sh * sw);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 * scale).min((sw - 1) as f64);
            let v = (y as f64 * scale).min((sh - 1) as f64);
            let taps = bilinear_weights(sh, sw, u, v).expect("clamped coordinate is inside the grid");
            b.push_row(&taps);
        }
    }
    b.build()
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, out_channels: usize, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut laterals = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.block_channels.iter().enumerate() {
            let w = store.add_weight(format!("backbone.block{i}.w"), 9 * cin, c, rng);
            let b = store.add_zeros(format!("backbone.block{i}.b"), 1, c);
            convs.push((w, b));
            laterals.push(Linear::new(store, &format!("backbone.lateral{i}"), c, out_channels, rng));
            cin = c;
        }
        Self { convs, laterals, plans: Mutex::new(HashMap::new()) }
    }

    fn plan(&self, h: usize, w: usize) -> Arc<Plan> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        plans
            .entry((h, w))
            .or_insert_with(|| {
                let mut convs = Vec::new();
                let mut sizes = Vec::new();
                let (mut ch, mut cw) = (h, w);
                for _ in &self.convs {
                    let (rb, (oh, ow)) = Rulebook::dense2d(ch, cw, 3, 2, 1);
                    convs.push(Arc::new(rb));
                    sizes.push((oh, ow));
                    (ch, cw) = (oh, ow);
                }
                let out = sizes[0];
                let upsample = sizes
                    .iter()
                    .enumerate()
                    .map(|(l, &(sh, sw))| Arc::new(resample_map(sh, sw, out.0, out.1, 1.0 / (1u64 << l) as f64)))
                    .collect();
                Arc::new(Plan { convs, upsample, out })
            })
            .clone()
    }

    /// Multi-scale features: each block's output is projected to `C`
    /// channels, bilinearly upsampled to `H/2 x W/2` and summed.
    pub fn encode(&self, cx: &mut Ctx, img: &RgbImage) -> FeatureMap {
        let plan = self.plan(img.height, img.width);
        let mut x = cx.constant(img.pixels.map(|v| v - 0.5));
        let mut fused: Option<Var> = None;
        for (l, (&(w, b), lateral)) in self.convs.iter().zip(&self.laterals).enumerate() {
            let (wv, bv) = (cx.p(w), cx.p(b));
            let y = cx.g.conv(x, wv, Some(bv), plan.convs[l].clone());
            x = cx.g.relu(y);
            let proj = lateral.forward(cx, x);
            let up = cx.g.sparse(proj, plan.upsample[l].clone());
            fused = Some(match fused {
                None => up,
                Some(f) => cx.g.add(f, up),
            });
        }
        FeatureMap { var: fused.expect("at least one block"), height: plan.out.0, width: plan.out.1 }
    }
}

/// Bilinear taps on the half-resolution feature grid for `x`, or `None` when
/// `x` is behind the camera or projects outside the grid.
pub fn feature_taps(x: &Vec3, cam: &Camera, fh: usize, fw: usize) -> Option<[(usize, f64); 4]> {
    let (u, v) = cam.project(x).ok()?;
    bilinear_weights(fh, fw, u / 2.0, v / 2.0)
}

/// Row map gathering pixel-aligned features of `points` from a feature grid.
pub fn pixel_aligned_map(points: &[Vec3], cam: &Camera, fh: usize, fw: usize) -> SparseMap {
    let mut b = SparseMap::builder(fh * fw);
    for p in points {
        match feature_taps(p, cam, fh, fw) {
            Some(t) => b.push_row(&t),
            None => b.push_empty(),
        }
    }
    b.build()
}

/// Pixel-aligned feature of a single point from a materialized map.
pub fn fetch_pixel_aligned(x: &Vec3, cam: &Camera, fmap: &Mat, fh: usize, fw: usize) -> Vec<f64> {
    match feature_taps(x, cam, fh, fw) {
        None => vec![0.0; fmap.cols()],
        Some(_) => {
            let (u, v) = cam.project(x).expect("taps imply a valid projection");
            crate::geometry::bilinear_sample(fmap, fh, fw, u / 2.0, v / 2.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(c: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, &BackboneConfig::default(), c, &mut rng);
        // Non-zero biases so the test sees their effect.
        for (id, name, _) in store.iter().map(|(i, n, m)| (i, n.to_string(), m.clone())).collect::<Vec<_>>() {
            if name.ends_with(".b") {
                store.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = 0.01 * (k % 5) as f64);
            }
        }
        (store, bb)
    }

    fn card(w: usize, h: usize, shift: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let xs = x as f64 - shift as f64;
                let v = 0.5 + 0.25 * (xs * 0.45).sin() * (y as f64 * 0.3).cos() + 0.2 * ((xs - 30.0).powi(2) + (y as f64 - 28.0).powi(2) < 40.0) as u8 as f64;
                img.set(x, y, [v, 1.0 - v, (v * 3.0) % 1.0]);
            }
        }
        img
    }

    #[test]
    fn shape_and_determinism() {
        let (store, bb) = backbone(32);
        let img = card(64, 64, 0);
        let mut cx = Ctx::new(&store, false);
        let f1 = bb.encode(&mut cx, &img);
        let f2 = bb.encode(&mut cx, &img);
        assert_eq!((f1.height, f1.width), (32, 32));
        assert_eq!(cx.value(f1.var).shape(), (32 * 32, 32));
        assert_eq!(cx.value(f1.var), cx.value(f2.var));
        assert!(cx.value(f1.var).all_finite());
    }

    #[test]
    fn two_pixel_shift_moves_features_one_cell() {
        let (store, bb) = backbone(8);
        let mut cx = Ctx::new(&store, false);
        let a = bb.encode(&mut cx, &card(64, 64, 0));
        let b = bb.encode(&mut cx, &card(64, 64, 2));
        let (fa, fb) = (cx.value(a.var).clone(), cx.value(b.var).clone());
        // Cross-correlation over horizontal feature shifts, interior only.
        let corr = |s: isize| {
            let mut acc = 0.0;
            for y in 8..24 {
                for x in 8..24 {
                    let xb = (x as isize + s) as usize;
                    acc -= fa.row(y * 32 + x).iter().zip(fb.row(y * 32 + xb)).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                }
            }
            acc
        };
        let best = (-3..=3).max_by(|&s, &t| corr(s).total_cmp(&corr(t))).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn fetch_matches_hand_gather() {
        let (store, bb) = backbone(8);
        let mut cx = Ctx::new(&store, false);
        let f = bb.encode(&mut cx, &card(64, 64, 0));
        let fm = cx.value(f.var).clone();
        let k = Intrinsics { fx: 80.0, fy: 80.0, cx: 31.5, cy: 31.5 };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), k, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..50).map(|_| Vec3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-0.5..0.5))).collect();
        let map = pixel_aligned_map(&pts, &cam, 32, 32);
        let gathered = map.apply(&fm);
        for (i, p) in pts.iter().enumerate() {
            let (u, v) = cam.project(p).unwrap();
            let (fu, fv) = (u / 2.0, v / 2.0);
            let mut expect = vec![0.0; 8];
            if fu >= 0.0 && fv >= 0.0 && fu <= 31.0 && fv <= 31.0 {
                let (x0, y0) = (fu.floor().min(30.0) as usize, fv.floor().min(30.0) as usize);
                let (ax, ay) = (fu - x0 as f64, fv - y0 as f64);
                for c in 0..8 {
                    expect[c] = fm.get(y0 * 32 + x0, c) * (1.0 - ax) * (1.0 - ay)
                        + fm.get(y0 * 32 + x0 + 1, c) * ax * (1.0 - ay)
                        + fm.get((y0 + 1) * 32 + x0, c) * (1.0 - ax) * ay
                        + fm.get((y0 + 1) * 32 + x0 + 1, c) * ax * ay;
                }
            }
            for c in 0..8 {
                assert!((gathered.get(i, c) - expect[c]).abs() < 1e-12);
            }
            assert_eq!(fetch_pixel_aligned(p, &cam, &fm, 32, 32), gathered.row(i).to_vec());
        }
        // Lattice point: exact value; behind the camera: zero.
        let lattice = cam.pixel_ray(20.0, 12.0).point_at(3.0);
        let got = fetch_pixel_aligned(&lattice, &cam, &fm, 32, 32);
        assert!(got.iter().zip(fm.row(6 * 32 + 10)).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(fetch_pixel_aligned(&Vec3::new(0.0, 0.0, -5.0), &cam, &fm, 32, 32).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fetch_is_lipschitz_in_the_point() {
        let (store, bb) = backbone(8);
        let mut cx = Ctx::new(&store, false);
        let f = bb.encode(&mut cx, &card(64, 64, 0));
        let fm = cx.value(f.var).clone();
        let k = Intrinsics { fx: 80.0, fy: 80.0, cx: 31.5, cy: 31.5 };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), k, 64, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let p = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 0.0);
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * 1e-6;
            let a = fetch_pixel_aligned(&p, &cam, &fm, 32, 32);
            let b = fetch_pixel_aligned(&(p + d), &cam, &fm, 32, 32);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / 1e-6);
        }
        let max_feat = fm.max_abs();
        // Bounded by (feature range) x (pixels per unit) within a cell.
        assert!(worst < 4.0 * max_feat * 80.0 / 2.0 / 2.0, "lipschitz ratio {worst}");
    }
}
