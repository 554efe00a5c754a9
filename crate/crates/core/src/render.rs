//! Ray generation against the body box, sample placement along rays and
//! emission-absorption compositing.

use rand::Rng;

use crate::geometry::{Aabb, Camera, Ray, Vec3};

/// Slab intersection of a ray with a box, clamped to `t >= 0`. `None` when
/// the ray misses or the box is behind the origin.
pub fn ray_bounds(ray: &Ray, bbox: &Aabb) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        let (lo, hi) = (bbox.min[a], bbox.max[a]);
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// `S` sample depths in `[near, far]`: one uniform draw per equal stratum
/// when `rng` is given, stratum midpoints otherwise.
pub fn sample_points(near: f64, far: f64, s: usize, rng: Option<&mut dyn rand::RngCore>) -> Vec<f64> {
    let step = (far - near) / s as f64;
    match rng {
        Some(r) => (0..s).map(|i| near + step * (i as f64 + r.random::<f64>())).collect(),
        None => (0..s).map(|i| near + step * (i as f64 + 0.5)).collect(),
    }
}

/// Sample spacings: `t[i+1] - t[i]`, and `far - t[S-1]` for the last sample.
pub fn sample_deltas(t: &[f64], far: f64) -> Vec<f64> {
    (0..t.len()).map(|i| if i + 1 < t.len() { t[i + 1] - t[i] } else { far - t[i] }).collect()
}

/// Pixel rays of `cam` (row-major pixel index) that hit `bbox`, with bounds.
pub fn rays_hitting(cam: &Camera, bbox: &Aabb) -> Vec<(usize, Ray, (f64, f64))> {
    let mut out = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.pixel_ray(x as f64, y as f64);
            if let Some(b) = ray_bounds(&ray, bbox) {
                out.push((y * cam.width + x, ray, b));
            }
        }
    }
    out
}

/// Inclusive pixel rectangle `(x0, y0, x1, y1)` covering the projection of a
/// box, clamped to the image; `None` if nothing projects inside.
pub fn bbox_crop(cam: &Camera, bbox: &Aabb) -> Option<(usize, usize, usize, usize)> {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in bbox.corners() {
        let (u, v, _) = cam.project_with_depth(&c)?;
        lo = (lo.0.min(u), lo.1.min(v));
        hi = (hi.0.max(u), hi.1.max(v));
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = lo.0.round().max(0.0);
    let y0 = lo.1.round().max(0.0);
    let x1 = hi.0.round().min(w - 1.0);
    let y1 = hi.1.round().min(h - 1.0);
    (x0 <= x1 && y0 <= y1).then(|| (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Cameras on a horizontal circle around `center`, all looking at it.
pub fn turntable(template: &Camera, center: &Vec3, radius: f64, height: f64, frames: usize) -> Vec<Camera> {
    (0..frames)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / frames as f64;
            let eye = center + Vec3::new(radius * th.sin(), height, radius * th.cos());
            Camera::look_at(eye, *center, Vec3::y(), template.intrinsics, template.width, template.height).expect("orbit camera is well posed")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use avatar_tensor::{composite_kernel, composite_weights};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cube() -> Aabb {
        Aabb { min: Vec3::new(-0.5, -0.5, -0.5), max: Vec3::new(0.5, 0.5, 0.5) }
    }

    fn ray(o: Vec3, d: Vec3) -> Ray {
        Ray { origin: o, dir: d.normalize(), t_near: 0.0, t_far: f64::INFINITY }
    }

    #[test]
    fn axis_aligned_slab() {
        let (a, b) = ray_bounds(&ray(Vec3::new(0.0, 0.0, -2.0), Vec3::z()), &unit_cube()).unwrap();
        assert!((a - 1.5).abs() < 1e-15 && (b - 2.5).abs() < 1e-15);
        assert!(ray_bounds(&ray(Vec3::new(0.0, 0.7, -2.0), Vec3::z()), &unit_cube()).is_none());
        assert!(ray_bounds(&ray(Vec3::new(0.0, 0.0, 2.0), Vec3::z()), &unit_cube()).is_none());
    }

    #[test]
    fn bounds_agree_with_marching() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bx = Aabb { min: Vec3::new(-0.3, -0.9, -0.2), max: Vec3::new(0.4, 0.8, 0.25) };
        let mut hits = 0;
        for _ in 0..300 {
            let o = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)) * 1.5;
            if bx.contains(&o) {
                continue;
            }
            let target = Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-1.0..1.0), rng.random_range(-0.4..0.4));
            let r = ray(o, target - o);
            let step = 1e-3;
            let (mut first, mut last) = (None, None);
            let mut t = 0.0;
            while t < 8.0 {
                if bx.contains(&r.point_at(t)) {
                    first.get_or_insert(t);
                    last = Some(t);
                }
                t += step;
            }
            match (ray_bounds(&r, &bx), first) {
                (Some((a, b)), Some(f)) => {
                    hits += 1;
                    assert!((a - f).abs() <= step && (b - last.unwrap()).abs() <= step);
                }
                (None, None) => {}
                // Grazing rays: whichever side saw the box saw less than a step of it.
                (Some((a, b)), None) => assert!(b - a <= step),
                (None, Some(f)) => assert!(last.unwrap() - f <= step),
            }
        }
        assert!(hits > 50);
    }

    #[test]
    fn sample_placement() {
        assert_eq!(sample_points(0.0, 1.0, 2, None), vec![0.25, 0.75]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_points(1.0, 3.0, 64, Some(&mut rng));
        for (i, v) in t.iter().enumerate() {
            let lo = 1.0 + 2.0 * i as f64 / 64.0;
            assert!(*v >= lo && *v < lo + 2.0 / 64.0);
        }
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        let d = sample_deltas(&t, 3.0);
        assert!((d.iter().sum::<f64>() - (3.0 - t[0])).abs() < 1e-12);
    }

    #[test]
    fn compositing_oracles() {
        let (c, a) = composite_kernel(&[0.0; 4], &[1.0; 12], &[0.1; 4]);
        assert_eq!((c, a), ([0.0; 3], 0.0));
        let (c, a) = composite_kernel(&[1e6, 1.0], &[0.2, 0.4, 0.6, 1.0, 1.0, 1.0], &[0.5, 0.5]);
        assert!((a - 1.0).abs() < 1e-12 && (c[0] - 0.2).abs() < 1e-12);
        // Two samples, sigma (1, 2), delta (0.5, 0.5), red then blue.
        let a1 = 1.0 - (-0.5f64).exp();
        let a2 = 1.0 - (-1.0f64).exp();
        let (c, a) = composite_kernel(&[1.0, 2.0], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[0.5, 0.5]);
        assert!((c[0] - a1).abs() < 1e-12 && (c[2] - (1.0 - a1) * a2).abs() < 1e-12 && c[1] == 0.0);
        assert!((a - (a1 + (1.0 - a1) * a2)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_minus_transmittance(sig in prop::collection::vec(0.0f64..50.0, 1..40), d in 0.001f64..0.2) {
            let deltas = vec![d; sig.len()];
            let w = composite_weights(&sig, &deltas);
            let trans = (-sig.iter().map(|s| s * d).sum::<f64>()).exp();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - (1.0 - trans)).abs() < 1e-9);
        }

        #[test]
        fn color_is_bounded_by_sample_colors(sig in prop::collection::vec(0.0f64..20.0, 2..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rgb: Vec<f64> = (0..sig.len() * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let (c, _) = composite_kernel(&sig, &rgb, &vec![0.05; sig.len()]);
            for ch in 0..3 {
                let mx = (0..sig.len()).map(|i| rgb[3 * i + ch]).fold(0.0, f64::max);
                prop_assert!(c[ch] <= mx + 1e-12 && c[ch] >= 0.0);
            }
        }
    }
}
