//! Body-anchored radiance field: per-view features attached to body vertices,
//! diffused into voxel volumes by sparse 3D convolutions, sampled at query
//! points, fused across views with cross-attention and decoded into density,
//! color, confidence and an intermediate color feature.

use std::sync::Arc;

use avatar_tensor::{Dims3, Mat, ParamStore, Rulebook, SparseMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::pixel_aligned_map;
use crate::geometry::{positional_encode, Aabb, Camera, PosEncConfig, Vec3};
use crate::nn::{Ctx, Linear, Mlp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NerfError {
    #[error("degenerate observation: the body projects into none of the source views")]
    BodyNotVisible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerfConfig {
    /// Nodes per axis of the voxelization over the body-local box.
    pub grid_resolution: usize,
    /// Stride of each diffusion conv layer (kernel 3, padding 1).
    pub diffusion_strides: Vec<usize>,
    pub head_width: usize,
    pub posenc: PosEncConfig,
}

impl Default for NerfConfig {
    fn default() -> Self {
        Self { grid_resolution: 32, diffusion_strides: vec![1, 2, 1], head_width: 64, posenc: PosEncConfig::default() }
    }
}

/// Per-view features attached to body vertices, positions in the body-local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchoredFeatureSet {
    pub positions: Vec<Vec3>,
    pub features: Mat,
}

/// Node-centred voxel lattice: node `i` along an axis sits at
/// `min + i * extent / (res - 1)`, so the first and last nodes lie on the box.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub bbox: Aabb,
    pub resolution: usize,
}

impl VoxelGrid {
    pub fn new(bbox: Aabb, resolution: usize) -> Self {
        assert!(resolution >= 2, "grid needs at least two nodes per axis");
        Self { bbox, resolution }
    }

    pub fn dims(&self) -> Dims3 {
        [self.resolution; 3]
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Continuous lattice coordinates `(x, y, z)` of a local point.
    pub fn coords(&self, p: &Vec3) -> Vec3 {
        let e = self.bbox.extent();
        let s = (self.resolution - 1) as f64;
        Vec3::new((p.x - self.bbox.min.x) / e.x * s, (p.y - self.bbox.min.y) / e.y * s, (p.z - self.bbox.min.z) / e.z * s)
    }

    pub fn node_position(&self, [z, y, x]: [usize; 3]) -> Vec3 {
        let e = self.bbox.extent();
        let s = (self.resolution - 1) as f64;
        self.bbox.min + Vec3::new(x as f64 * e.x / s, y as f64 * e.y / s, z as f64 * e.z / s)
    }

    pub fn nearest_node(&self, p: &Vec3) -> usize {
        let c = self.coords(p);
        let r = self.resolution;
        let idx = |v: f64| (v.round().max(0.0) as usize).min(r - 1);
        (idx(c.z) * r + idx(c.y)) * r + idx(c.x)
    }
}

/// Trilinear taps at lattice coordinates `c = (x, y, z)` on a grid of `dims`
/// (`[depth, height, width]`); coordinates are clamped to the grid.
pub fn trilinear_weights(dims: Dims3, c: &Vec3) -> [(usize, f64); 8] {
    let axis = |v: f64, n: usize| {
        let v = v.clamp(0.0, (n - 1) as f64);
        let i0 = (v.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, v - i0 as f64)
    };
    let (x0, x1, fx) = axis(c.x, dims[2]);
    let (y0, y1, fy) = axis(c.y, dims[1]);
    let (z0, z1, fz) = axis(c.z, dims[0]);
    let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    [
        (idx(z0, y0, x0), (1.0 - fz) * (1.0 - fy) * (1.0 - fx)),
        (idx(z0, y0, x1), (1.0 - fz) * (1.0 - fy) * fx),
        (idx(z0, y1, x0), (1.0 - fz) * fy * (1.0 - fx)),
        (idx(z0, y1, x1), (1.0 - fz) * fy * fx),
        (idx(z1, y0, x0), fz * (1.0 - fy) * (1.0 - fx)),
        (idx(z1, y0, x1), fz * (1.0 - fy) * fx),
        (idx(z1, y1, x0), fz * fy * (1.0 - fx)),
        (idx(z1, y1, x1), fz * fy * fx),
    ]
}

/// Geometry shared by every view's volume for one posed body: the lattice,
/// the vertex-to-node splat, the diffusion rulebooks and the sampled levels.
#[derive(Clone, Debug)]
pub struct VolumePlan {
    pub grid: VoxelGrid,
    /// `V -> nodes`: each active node averages the vertices nearest to it.
    pub splat: Arc<SparseMap>,
    pub rulebooks: Vec<Arc<Rulebook>>,
    /// Grid dims after each conv layer.
    pub layer_dims: Vec<Dims3>,
    /// Cumulative stride after each conv layer.
    pub layer_strides: Vec<usize>,
}

impl VolumePlan {
    pub fn new(local_positions: &[Vec3], grid: VoxelGrid, strides: &[usize]) -> Self {
        let n = grid.num_nodes();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (v, p) in local_positions.iter().enumerate() {
            members[grid.nearest_node(p)].push(v);
        }
        let mut b = SparseMap::builder(local_positions.len());
        let mut active = vec![false; n];
        for (node, m) in members.iter().enumerate() {
            if m.is_empty() {
                b.push_empty();
            } else {
                active[node] = true;
                let w = 1.0 / m.len() as f64;
                b.push_row(&m.iter().map(|&v| (v, w)).collect::<Vec<_>>());
            }
        }
        let mut rulebooks = Vec::new();
        let mut layer_dims = Vec::new();
        let mut layer_strides = Vec::new();
        let (mut dims, mut cum) = (grid.dims(), 1);
        for &s in strides {
            let (rb, od, act) = Rulebook::sparse3d(dims, &active, 3, s, 1);
            rulebooks.push(Arc::new(rb));
            layer_dims.push(od);
            cum *= s;
            layer_strides.push(cum);
            (dims, active) = (od, act);
        }
        Self { grid, splat: Arc::new(b.build()), rulebooks, layer_dims, layer_strides }
    }

    /// Layers whose outputs are summed when sampling: the first layer (a
    /// full-resolution skip) and the last.
    pub fn sampled_layers(&self) -> Vec<usize> {
        let last = self.rulebooks.len() - 1;
        if last == 0 {
            vec![0]
        } else {
            vec![0, last]
        }
    }

    /// Trilinear sampling maps, one per sampled layer, for local query
    /// points. Points outside the box get empty rows (zero features).
    pub fn sample_maps(&self, local: &[Vec3]) -> Vec<Arc<SparseMap>> {
        self.sampled_layers()
            .into_iter()
            .map(|l| {
                let dims = self.layer_dims[l];
                let s = self.layer_strides[l] as f64;
                let mut b = SparseMap::builder(dims[0] * dims[1] * dims[2]);
                for p in local {
                    if self.grid.bbox.contains(p) {
                        b.push_row(&trilinear_weights(dims, &(self.grid.coords(p) / s)));
                    } else {
                        b.push_empty();
                    }
                }
                Arc::new(b.build())
            })
            .collect()
    }
}

/// Numeric anchoring: for every view, features fetched at the projection of
/// `fetch_world[v]` and stored at `local[v]`.
pub fn anchor_features(fetch_world: &[Vec3], local: &[Vec3], cams: &[Camera], fmaps: &[(Mat, usize, usize)]) -> Vec<AnchoredFeatureSet> {
    cams.iter()
        .zip(fmaps)
        .map(|(cam, (fm, h, w))| AnchoredFeatureSet {
            positions: local.to_vec(),
            features: pixel_aligned_map(fetch_world, cam, *h, *w).apply(fm),
        })
        .collect()
}

/// Fails when no vertex projects into any source view.
pub fn check_visible(fetch_world: &[Vec3], cams: &[Camera]) -> Result<(), NerfError> {
    let seen = cams.iter().any(|c| fetch_world.iter().any(|v| c.project(v).is_ok_and(|(u, v)| c.in_image(u, v))));
    if seen {
        Ok(())
    } else {
        Err(NerfError::BodyNotVisible)
    }
}

/// Sparse 3D conv stack turning anchored features into a feature volume.
#[derive(Clone, Debug)]
pub struct Diffusion {
    pub layers: Vec<Linear>,
}

impl Diffusion {
    pub fn new(store: &mut ParamStore, c: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|i| Linear { w: store.add_weight(format!("diffusion.{i}.w"), 27 * c, c, rng), b: store.add_zeros(format!("diffusion.{i}.b"), 1, c) })
            .collect();
        Self { layers }
    }

    /// Anchored `V x C` features to the per-layer volumes that are sampled.
    pub fn forward(&self, cx: &mut Ctx, plan: &VolumePlan, anchored: Var) -> Vec<Var> {
        let mut x = cx.g.sparse(anchored, plan.splat.clone());
        let n = self.layers.len();
        let mut outs = Vec::with_capacity(n);
        for (i, (l, rb)) in self.layers.iter().zip(&plan.rulebooks).enumerate() {
            let (w, b) = (cx.p(l.w), cx.p(l.b));
            let y = cx.g.conv(x, w, Some(b), rb.clone());
            x = if i + 1 < n { cx.g.relu(y) } else { y };
            outs.push(x);
        }
        plan.sampled_layers().into_iter().map(|l| outs[l]).collect()
    }
}

/// Body feature at query points: sum over sampled layers.
pub fn sample_body_feature(cx: &mut Ctx, levels: &[Var], maps: &[Arc<SparseMap>]) -> Var {
    let mut acc: Option<Var> = None;
    for (&lv, m) in levels.iter().zip(maps) {
        let s = cx.g.sparse(lv, m.clone());
        acc = Some(match acc {
            None => s,
            Some(a) => cx.g.add(a, s),
        });
    }
    acc.expect("at least one level")
}

/// Stacks per-view `P x C` blocks into `(P*N) x C`, point-major.
pub fn interleave_views(cx: &mut Ctx, per_view: &[Var]) -> Var {
    let (p, c) = cx.value(per_view[0]).shape();
    if per_view.len() == 1 {
        return per_view[0];
    }
    let cat = cx.g.concat_cols(per_view);
    cx.g.reshape(cat, p * per_view.len(), c)
}

/// `Z = softmax(φk(S) φk(L)^T / sqrt(d)) φv(L) + S` within each point's views.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub phi_k: Linear,
    pub phi_v: Linear,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, c: usize, rng: &mut impl Rng) -> Self {
        Self { phi_k: Linear::new(store, "attention.phi_k", c, c, rng), phi_v: Linear::new(store, "attention.phi_v", c, c, rng) }
    }

    pub fn forward(&self, cx: &mut Ctx, s: Var, l: Var, views: usize) -> Var {
        let q = self.phi_k.forward(cx, s);
        let k = self.phi_k.forward(cx, l);
        let v = self.phi_v.forward(cx, l);
        let a = cx.g.attention(q, k, v, views);
        cx.g.add(a, s)
    }
}

/// Outputs of the density and color heads for `P` points.
#[derive(Clone, Copy, Debug)]
pub struct RadianceVars {
    pub sigma: Var,
    pub c0: Var,
    pub psi: Var,
    pub h: Var,
}

/// Numeric radiance prediction for one point.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub c0: [f64; 3],
    pub psi: f64,
    pub h: Vec<f64>,
    pub z: Mat,
}

/// Shift applied inside the density softplus so an untrained field starts
/// nearly transparent.
pub const DENSITY_SHIFT: f64 = -1.0;

#[derive(Clone, Debug)]
pub struct Heads {
    pub density: Mlp,
    pub color: Mlp,
    pub posenc: PosEncConfig,
}

impl Heads {
    pub fn new(store: &mut ParamStore, c: usize, width: usize, posenc: PosEncConfig, rng: &mut impl Rng) -> Self {
        Self {
            density: Mlp::new(store, "density", &[c, width, width, width, 1], rng),
            color: Mlp::new(store, "color", &[c + posenc.output_dim(), width, width, width, 4], rng),
            posenc,
        }
    }

    /// `z` is `(P*N) x C`, point-major; `dirs` are per-point unit directions.
    pub fn forward(&self, cx: &mut Ctx, z: Var, views: usize, dirs: &[Vec3]) -> RadianceVars {
        let p = dirs.len();
        let zmean = cx.g.sparse(z, Arc::new(SparseMap::group_mean(p, views)));
        let sigma = density(cx, &self.density, zmean);
        let enc = Mat::from_rows(&dirs.iter().map(|d| positional_encode(d, self.posenc)).collect::<Vec<_>>());
        let enc = cx.constant(enc);
        let inp = cx.g.concat_cols(&[zmean, enc]);
        let (raw, h) = self.color.forward_with_hidden(cx, inp);
        let out = cx.g.sigmoid(raw);
        let c0 = cx.g.slice_cols(out, 0, 3);
        let psi = cx.g.slice_cols(out, 3, 1);
        RadianceVars { sigma, c0, psi, h }
    }
}

/// Nonnegative density from a feature.
pub fn density(cx: &mut Ctx, mlp: &Mlp, x: Var) -> Var {
    let raw = mlp.forward(cx, x);
    cx.g.softplus(raw, DENSITY_SHIFT)
}
