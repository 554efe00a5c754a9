//! Fusion of the field's own color with colors fetched directly from the
//! source images, weighted by a learned softmax over `N + 1` channels
//! (channel 0 is the field color).

use std::sync::Arc;

use avatar_tensor::{softmax_in_place, Mat, ParamId, ParamStore, SparseMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{bilinear_sample, Camera, Vec3};
use crate::imaging::RgbImage;
use crate::nn::{Ctx, Linear, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    Learned,
    SimpleAvg,
    CosineWeighted,
}

impl std::str::FromStr for BlendMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(Self::Learned),
            "simple_avg" => Ok(Self::SimpleAvg),
            "cosine_weighted" => Ok(Self::CosineWeighted),
            _ => Err(format!("unknown blend mode `{s}` (expected learned, simple_avg or cosine_weighted)")),
        }
    }
}

/// `(d - d_n, d . d_n)`.
pub fn relative_direction(d: &Vec3, dn: &Vec3) -> [f64; 4] {
    let diff = d - dn;
    [diff.x, diff.y, diff.z, d.dot(dn)]
}

/// Unit direction from the camera centre towards `x`.
pub fn source_direction(cam: &Camera, x: &Vec3) -> Vec3 {
    (x - cam.center()).normalize()
}

/// Source color at the projection of `x`; `None` when `x` is behind the
/// camera or lands outside the image.
pub fn fetch_source_color(x: &Vec3, cam: &Camera, img: &RgbImage) -> Option<[f64; 3]> {
    let (u, v) = cam.project(x).ok()?;
    if !cam.in_image(u, v) {
        return None;
    }
    let (uc, vc) = (u.clamp(0.0, (img.width - 1) as f64), v.clamp(0.0, (img.height - 1) as f64));
    let c = bilinear_sample(&img.pixels, img.height, img.width, uc, vc);
    Some([c[0], c[1], c[2]])
}

/// Per-point, per-view quantities that feed the blender.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub color: [f64; 3],
    pub visibility: f64,
    pub in_frustum: bool,
    pub rel_dir: [f64; 4],
}

/// Softmax over logits, then the weighted sum of candidate colors.
pub fn softmax_blend(logits: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], Vec<f64>) {
    let mut w = logits.to_vec();
    softmax_in_place(&mut w);
    let mut c = [0.0; 3];
    for (wn, cn) in w.iter().zip(colors) {
        for ch in 0..3 {
            c[ch] += wn * cn[ch];
        }
    }
    (c, w)
}

/// Fixed blend weights over `[c0, c1..cN]` for the non-learned modes.
/// `SimpleAvg` is uniform over c0 and the in-frustum views; `CosineWeighted`
/// uses only source views, proportional to `max(0, d . d_n)`, falling back to
/// c0 when no view qualifies.
pub fn fixed_weights(mode: BlendMode, views: &[ViewSample]) -> Vec<f64> {
    let mut w = vec![0.0; views.len() + 1];
    match mode {
        BlendMode::Learned => panic!("learned weights come from the network"),
        BlendMode::SimpleAvg => {
            w[0] = 1.0;
            for (i, v) in views.iter().enumerate() {
                if v.in_frustum {
                    w[i + 1] = 1.0;
                }
            }
        }
        BlendMode::CosineWeighted => {
            for (i, v) in views.iter().enumerate() {
                if v.in_frustum {
                    w[i + 1] = v.rel_dir[3].max(0.0);
                }
            }
            if w.iter().sum::<f64>() == 0.0 {
                w[0] = 1.0;
            }
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Per-view input width: pixel-aligned feature, relative direction, visibility.
pub fn view_input_dim(c: usize) -> usize {
    c + 5
}

/// Learned blending network. A shared trunk maps each view's
/// `[p_n, d̂_n, o_n]` together with the point's `[h, ψ]` to one logit; a
/// separate head maps `[h, ψ]` to the logit of channel 0.
#[derive(Clone, Debug)]
pub struct Blender {
    pub view_in: Linear,
    /// Point-level part of the first trunk layer, absent without the field.
    pub point_in: Option<Linear>,
    pub trunk: Mlp,
    pub channel0: Option<Mlp>,
}

impl Blender {
    /// `point_dim` is the width of `[h, ψ]`, or `None` when the field does
    /// not contribute a color.
    pub fn new(store: &mut ParamStore, c: usize, point_dim: Option<usize>, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        assert!(layers >= 2, "blender needs at least two layers");
        let view_in = Linear::new(store, "blend.in_view", view_input_dim(c), width, rng);
        let point_in = point_dim.map(|d| Linear::new(store, "blend.in_point", d, width, rng));
        let mut dims = vec![width; layers - 1];
        dims.push(1);
        let trunk = Mlp::new(store, "blend.trunk", &dims, rng);
        let channel0 = point_dim.map(|d| Mlp::new(store, "blend.channel0", &[d, width, 1], rng));
        Self { view_in, point_in, trunk, channel0 }
    }

    /// Logits `P x (N + 1)` (or `P x N` without channel 0). `per_view` is
    /// `(P*N) x view_input_dim`, point-major; `point` is `P x point_dim`.
    pub fn logits(&self, cx: &mut Ctx, per_view: Var, point: Option<Var>, views: usize) -> Var {
        let rows = cx.value(per_view).rows();
        let p = rows / views;
        let mut x = self.view_in.forward(cx, per_view);
        if let (Some(pi), Some(pt)) = (&self.point_in, point) {
            let y = pi.forward(cx, pt);
            let rep = cx.g.sparse(y, Arc::new(SparseMap::repeat_rows(p, views)));
            x = cx.g.add(x, rep);
        }
        x = cx.g.relu(x);
        let lv = self.trunk.forward(cx, x);
        let lv = cx.g.reshape(lv, p, views);
        match (&self.channel0, point) {
            (Some(head), Some(pt)) => {
                let l0 = head.forward(cx, pt);
                cx.g.concat_cols(&[l0, lv])
            }
            _ => lv,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.view_in.w, self.view_in.b];
        if let Some(p) = &self.point_in {
            ids.extend([p.w, p.b]);
        }
        ids.extend(self.trunk.param_ids());
        if let Some(h) = &self.channel0 {
            ids.extend(h.param_ids());
        }
        ids
    }
}

/// Softmax over logit rows and the blended color. `colors` is `P x 3K` for
/// `K` logit columns. Returns `(c, weights)`.
pub fn blend(cx: &mut Ctx, logits: Var, colors: Var) -> (Var, Var) {
    let w = cx.g.softmax_rows(logits);
    (cx.g.blend_colors(w, colors), w)
}

/// Packs per-view blend inputs `[p_n, d̂_n, o_n]` point-major given the
/// interleaved pixel-aligned features.
pub fn pack_view_inputs(cx: &mut Ctx, l_pm: Var, samples: &[Vec<ViewSample>]) -> Var {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .flat_map(|views| views.iter().map(|v| vec![v.rel_dir[0], v.rel_dir[1], v.rel_dir[2], v.rel_dir[3], v.visibility]))
        .collect();
    let geo = cx.constant(Mat::from_rows(&rows));
    cx.g.concat_cols(&[l_pm, geo])
}

/// `P x 3N` source colors, view-major within each row.
pub fn source_color_matrix(samples: &[Vec<ViewSample>]) -> Mat {
    Mat::from_rows(&samples.iter().map(|views| views.iter().flat_map(|v| v.color).collect()).collect::<Vec<_>>())
}
