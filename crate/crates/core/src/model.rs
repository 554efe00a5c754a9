//! The full avatar model: image encoder, body-anchored field, view blending
//! and compositing, wired for a prepared scene (source views of one body plus
//! an optional new target pose).

use std::sync::Arc;

use avatar_tensor::{composite_weights, Mat, ParamStore, SparseMap, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{pixel_aligned_map, Backbone, BackboneConfig};
use crate::blend::{blend, fixed_weights, pack_view_inputs, relative_direction, source_color_matrix, source_direction, fetch_source_color, BlendMode, Blender, ViewSample};
use crate::body::{interpolate_scalar, BodyError, BodyPose, BodyTemplate, PosedBody};
use crate::data::SourceView;
use crate::geometry::{Aabb, Camera, Ray, Vec3};
use crate::imaging::{GrayImage, RgbImage};
use crate::nerf::{check_visible, density, interleave_views, sample_body_feature, CrossAttention, Diffusion, Heads, NerfConfig, NerfError, VolumePlan, VoxelGrid};
use crate::nn::{Ctx, Mlp};
use crate::render::{rays_hitting, sample_deltas, sample_points};
use crate::repose::{DeformationContext, ReposeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nerf(#[from] NerfError),
    #[error(transparent)]
    Repose(#[from] ReposeError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of pixel-aligned and body features.
    pub feature_dim: usize,
    pub backbone: BackboneConfig,
    pub nerf: NerfConfig,
    pub blend_width: usize,
    pub blend_layers: usize,
    /// Use the field color `c0` alone (no source colors).
    pub disable_ibr: bool,
    /// Drop the body-anchored field; density comes from averaged
    /// pixel-aligned features and colors from the source views only.
    pub disable_body_nerf: bool,
    pub blend_mode: BlendMode,
    /// Samples farther than this fraction of the target box diagonal from the
    /// body surface are treated as empty space.
    pub cull_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            backbone: BackboneConfig::default(),
            nerf: NerfConfig { head_width: 32, ..NerfConfig::default() },
            blend_width: 32,
            blend_layers: 4,
            disable_ibr: false,
            disable_body_nerf: false,
            blend_mode: BlendMode::Learned,
            cull_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.disable_ibr && self.disable_body_nerf {
            return bad("disable_ibr and disable_body_nerf together leave no color source");
        }
        if self.disable_ibr && self.blend_mode != BlendMode::Learned {
            return bad("blend_mode has no effect with disable_ibr; leave it at `learned`");
        }
        if self.feature_dim == 0 || self.blend_width == 0 || self.nerf.head_width == 0 {
            return bad("feature_dim, blend_width and nerf.head_width must be positive");
        }
        if self.blend_layers < 2 {
            return bad("blend_layers must be at least 2");
        }
        if self.backbone.block_channels.is_empty() || self.backbone.block_channels.contains(&0) {
            return bad("backbone.block_channels must be non-empty and positive");
        }
        if self.nerf.grid_resolution < 2 || self.nerf.diffusion_strides.is_empty() || self.nerf.diffusion_strides.contains(&0) {
            return bad("nerf.grid_resolution must be >= 2 and diffusion_strides non-empty and positive");
        }
        if !(self.cull_fraction > 0.0) {
            return bad("cull_fraction must be positive");
        }
        Ok(())
    }

    /// Whether the field predicts its own color `c0`.
    pub fn has_field_color(&self) -> bool {
        !self.disable_body_nerf
    }

    /// Whether source colors are blended in.
    pub fn has_ibr(&self) -> bool {
        !self.disable_ibr
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    diffusion: Option<Diffusion>,
    attention: Option<CrossAttention>,
    heads: Option<Heads>,
    feature_density: Option<Mlp>,
    blender: Option<Blender>,
}

/// Prepared geometry for rendering one body: source views at the reference
/// pose and the pose in which the body is rendered.
#[derive(Clone, Debug)]
pub struct Scene {
    pub deform: DeformationContext,
    pub cams: Vec<Camera>,
    pub images: Vec<RgbImage>,
    /// Per source view, 0/1 visibility of every reference-pose vertex.
    pub visibility: Vec<Vec<f64>>,
    pub plan: VolumePlan,
    /// Enlarged world box of the target-pose body; rays are bounded by it.
    pub bbox: Aabb,
    cull_distance: f64,
}

impl Scene {
    /// `target` defaults to the reference pose (novel view synthesis).
    pub fn new(
        template: Arc<BodyTemplate>,
        reference: &BodyPose,
        target: Option<&BodyPose>,
        sources: &[SourceView],
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let faces = Arc::new(template.faces.clone());
        let reference_body = PosedBody::new(&template, &faces, reference)?;
        let target_body = match target {
            Some(t) if t != reference => PosedBody::new(&template, &faces, t)?,
            _ => reference_body.clone(),
        };
        let deform = DeformationContext::from_bodies(template, reference_body, target_body);
        let cams: Vec<Camera> = sources.iter().map(|s| s.camera.clone()).collect();
        check_visible(deform.reference.vertices(), &cams)?;
        let eps = deform.reference.mesh.default_depth_eps();
        let visibility = cams.iter().map(|c| deform.reference.mesh.vertex_visibility(c, eps)).collect();
        let grid = VoxelGrid::new(deform.target.local_bbox(), cfg.nerf.grid_resolution);
        let plan = VolumePlan::new(&deform.target_anchor_positions(), grid, &cfg.nerf.diffusion_strides);
        let bbox = deform.target.bbox();
        let cull_distance = cfg.cull_fraction * bbox.diagonal();
        Ok(Self { deform, cams, images: sources.iter().map(|s| s.image.clone()).collect(), visibility, plan, bbox, cull_distance })
    }

    pub fn num_views(&self) -> usize {
        self.cams.len()
    }

    /// Geometry of the query samples `points` (target space) viewed along
    /// `dirs`. Samples far from the body, or whose deformation is
    /// degenerate, are left out of `active`.
    pub fn query_geometry(&self, points: &[Vec3], dirs: &[Vec3]) -> QueryGeometry {
        let mut geo = QueryGeometry { total: points.len(), ..Default::default() };
        let faces = &self.deform.reference.mesh.faces;
        for (i, (x, d)) in points.iter().zip(dirs).enumerate() {
            if !self.bbox.contains(x) {
                continue;
            }
            let qt = self.deform.target.mesh.nearest_surface(x);
            if qt.distance > self.cull_distance {
                continue;
            }
            let Ok(def) = self.deform.deform(x, d) else { continue };
            let qr = if self.deform.identity { qt } else { self.deform.reference.mesh.nearest_surface(&def.point) };
            let views = self
                .cams
                .iter()
                .zip(&self.images)
                .zip(&self.visibility)
                .map(|((cam, img), vis)| {
                    let rel_dir = relative_direction(&def.dir, &source_direction(cam, &def.point));
                    match fetch_source_color(&def.point, cam, img) {
                        Some(color) => ViewSample { color, visibility: interpolate_scalar(&qr, faces, vis), in_frustum: true, rel_dir },
                        None => ViewSample { color: [0.0; 3], visibility: 0.0, in_frustum: false, rel_dir },
                    }
                })
                .collect();
            geo.active.push(i);
            geo.local.push(self.deform.target.to_local(x));
            geo.x_ref.push(def.point);
            geo.d_ref.push(def.dir);
            geo.views.push(views);
        }
        geo
    }
}

/// Per-sample inputs for the active (non-culled) query samples.
#[derive(Clone, Debug, Default)]
pub struct QueryGeometry {
    /// Indices of active samples among all `total` samples.
    pub active: Vec<usize>,
    /// Target-pose body-local positions.
    pub local: Vec<Vec3>,
    /// Positions and unit view directions mapped into the reference pose.
    pub x_ref: Vec<Vec3>,
    pub d_ref: Vec<Vec3>,
    pub views: Vec<Vec<ViewSample>>,
    pub total: usize,
}

/// Image features and body feature volumes of a scene, bound into a graph.
#[derive(Clone, Debug)]
pub struct SceneFeatures {
    pub fmaps: Vec<Var>,
    pub fsize: (usize, usize),
    /// Per view, the sampled volume levels (empty without the field).
    pub levels: Vec<Vec<Var>>,
}

/// Numeric copy of [`SceneFeatures`], reused across render chunks.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    pub fmaps: Vec<Mat>,
    pub fsize: (usize, usize),
    pub levels: Vec<Vec<Mat>>,
}

impl FrozenFeatures {
    pub fn bind(&self, cx: &mut Ctx) -> SceneFeatures {
        SceneFeatures {
            fmaps: self.fmaps.iter().map(|m| cx.constant(m.clone())).collect(),
            fsize: self.fsize,
            levels: self.levels.iter().map(|ls| ls.iter().map(|m| cx.constant(m.clone())).collect()).collect(),
        }
    }
}

/// Per-point outputs for the active samples.
#[derive(Clone, Copy, Debug)]
pub struct PointOutputs {
    pub sigma: Var,
    /// Final (blended) color.
    pub color: Var,
    pub c0: Option<Var>,
    /// `P x K` blend weights over `[c0, c1..cN]` (or `[c1..cN]` without the field).
    pub weights: Option<Var>,
}

/// Composited outputs for a ray batch.
#[derive(Clone, Debug)]
pub struct RayOutputs {
    /// `R x 4`: blended color and accumulated alpha.
    pub rgba: Var,
    /// `R x 4` from compositing `c0` with the same densities.
    pub rgba0: Option<Var>,
    pub points: Option<PointOutputs>,
    pub geometry: QueryGeometry,
    pub deltas: Arc<Vec<f64>>,
    pub samples: usize,
}

/// A ray with its sample depths and far bound.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub ray: Ray,
    pub t: Vec<f64>,
    pub far: f64,
}

impl RaySamples {
    pub fn new(ray: Ray, (near, far): (f64, f64), s: usize, rng: Option<&mut dyn rand::RngCore>) -> Self {
        Self { t: sample_points(near, far, s, rng), ray, far }
    }
}

/// A rendered target view.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: RgbImage,
    pub alpha: GrayImage,
    /// Composited field color `c0`, when the model has one.
    pub image0: Option<RgbImage>,
    /// Per blend channel, the compositing-weighted blend weight.
    pub blend_maps: Vec<GrayImage>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.feature_dim;
        let backbone = Backbone::new(&mut store, &cfg.backbone, c, &mut rng);
        let (mut diffusion, mut attention, mut heads, mut feature_density) = (None, None, None, None);
        if cfg.disable_body_nerf {
            let w = cfg.nerf.head_width;
            feature_density = Some(Mlp::new(&mut store, "feature_density", &[c, w, w, w, 1], &mut rng));
        } else {
            diffusion = Some(Diffusion::new(&mut store, c, cfg.nerf.diffusion_strides.len(), &mut rng));
            attention = Some(CrossAttention::new(&mut store, c, &mut rng));
            heads = Some(Heads::new(&mut store, c, cfg.nerf.head_width, cfg.nerf.posenc, &mut rng));
        }
        let blender = (cfg.has_ibr() && cfg.blend_mode == BlendMode::Learned).then(|| {
            let point_dim = cfg.has_field_color().then_some(cfg.nerf.head_width + 1);
            Blender::new(&mut store, c, point_dim, cfg.blend_width, cfg.blend_layers, &mut rng)
        });
        Ok(Self { cfg, store, backbone, diffusion, attention, heads, feature_density, blender })
    }

    /// Prepares a scene with this model's grid and culling settings.
    pub fn scene(&self, template: Arc<BodyTemplate>, reference: &BodyPose, target: Option<&BodyPose>, sources: &[SourceView]) -> Result<Scene, ModelError> {
        Scene::new(template, reference, target, sources, &self.cfg)
    }

    /// Number of blend channels for `views` source views.
    pub fn blend_channels(&self, views: usize) -> usize {
        match (self.cfg.has_ibr(), self.cfg.has_field_color()) {
            (true, true) => views + 1,
            (true, false) => views,
            (false, _) => 0,
        }
    }

    pub fn features(&self, cx: &mut Ctx, scene: &Scene) -> SceneFeatures {
        let maps: Vec<_> = scene.images.iter().map(|img| self.backbone.encode(cx, img)).collect();
        let fsize = (maps[0].height, maps[0].width);
        let fmaps: Vec<Var> = maps.iter().map(|m| m.var).collect();
        let levels = match &self.diffusion {
            None => vec![Vec::new(); fmaps.len()],
            Some(diff) => scene
                .cams
                .iter()
                .zip(&fmaps)
                .map(|(cam, &fm)| {
                    let map = pixel_aligned_map(scene.deform.reference.vertices(), cam, fsize.0, fsize.1);
                    let anchored = cx.g.sparse(fm, Arc::new(map));
                    diff.forward(cx, &scene.plan, anchored)
                })
                .collect(),
        };
        SceneFeatures { fmaps, fsize, levels }
    }

    pub fn frozen_features(&self, scene: &Scene) -> FrozenFeatures {
        let mut cx = Ctx::new(&self.store, false);
        let f = self.features(&mut cx, scene);
        FrozenFeatures {
            fmaps: f.fmaps.iter().map(|&v| cx.value(v).clone()).collect(),
            fsize: f.fsize,
            levels: f.levels.iter().map(|ls| ls.iter().map(|&v| cx.value(v).clone()).collect()).collect(),
        }
    }

    /// Density, colors and blend weights for the active samples of `geo`.
    pub fn forward_points(&self, cx: &mut Ctx, scene: &Scene, feats: &SceneFeatures, geo: &QueryGeometry) -> PointOutputs {
        let n = scene.num_views();
        let (fh, fw) = feats.fsize;
        let per_view_l: Vec<Var> = scene
            .cams
            .iter()
            .zip(&feats.fmaps)
            .map(|(cam, &fm)| cx.g.sparse(fm, Arc::new(pixel_aligned_map(&geo.x_ref, cam, fh, fw))))
            .collect();
        let l = interleave_views(cx, &per_view_l);
        let p = geo.active.len();

        let (sigma, c0, point) = match (&self.heads, &self.attention, &self.feature_density) {
            (Some(heads), Some(att), _) => {
                let maps = scene.plan.sample_maps(&geo.local);
                let per_view_s: Vec<Var> = feats.levels.iter().map(|lv| sample_body_feature(cx, lv, &maps)).collect();
                let s = interleave_views(cx, &per_view_s);
                let z = att.forward(cx, s, l, n);
                let out = heads.forward(cx, z, n, &geo.d_ref);
                let point = cx.g.concat_cols(&[out.h, out.psi]);
                (out.sigma, Some(out.c0), Some(point))
            }
            (_, _, Some(mlp)) => {
                let lmean = cx.g.sparse(l, Arc::new(SparseMap::group_mean(p, n)));
                (density(cx, mlp, lmean), None, None)
            }
            _ => unreachable!("model has either the field or the feature density"),
        };

        if !self.cfg.has_ibr() {
            let c0 = c0.expect("field color without image-based rendering");
            return PointOutputs { sigma, color: c0, c0: Some(c0), weights: None };
        }
        let src = cx.constant(source_color_matrix(&geo.views));
        let colors = match c0 {
            Some(c0) => cx.g.concat_cols(&[c0, src]),
            None => src,
        };
        let (color, weights) = match &self.blender {
            Some(b) => {
                let inp = pack_view_inputs(cx, l, &geo.views);
                let logits = b.logits(cx, inp, point, n);
                blend(cx, logits, colors)
            }
            None => {
                let rows: Vec<Vec<f64>> = geo.views.iter().map(|v| self.fixed_row(v)).collect();
                let w = cx.constant(Mat::from_rows(&rows));
                (cx.g.blend_colors(w, colors), w)
            }
        };
        PointOutputs { sigma, color, c0, weights: Some(weights) }
    }

    fn fixed_row(&self, views: &[ViewSample]) -> Vec<f64> {
        let w = fixed_weights(self.cfg.blend_mode, views);
        if self.cfg.has_field_color() {
            return w;
        }
        let rest = &w[1..];
        let s: f64 = rest.iter().sum();
        if s > 0.0 {
            rest.iter().map(|x| x / s).collect()
        } else {
            rest.to_vec()
        }
    }

    /// Renders a batch of rays sharing one sample count.
    pub fn render_rays(&self, cx: &mut Ctx, scene: &Scene, feats: &SceneFeatures, rays: &[RaySamples]) -> RayOutputs {
        let s = rays.first().map_or(0, |r| r.t.len());
        assert!(rays.iter().all(|r| r.t.len() == s), "rays must share a sample count");
        let mut points = Vec::with_capacity(rays.len() * s);
        let mut dirs = Vec::with_capacity(rays.len() * s);
        let mut deltas = Vec::with_capacity(rays.len() * s);
        for r in rays {
            points.extend(r.t.iter().map(|&t| r.ray.point_at(t)));
            dirs.extend(std::iter::repeat_n(r.ray.dir, s));
            deltas.extend(sample_deltas(&r.t, r.far));
        }
        let deltas = Arc::new(deltas);
        let geo = scene.query_geometry(&points, &dirs);
        let total = geo.total;
        let (sigma_all, color_all, c0_all, pts) = if geo.active.is_empty() {
            let z1 = cx.constant(Mat::zeros(total, 1));
            let z3 = cx.constant(Mat::zeros(total, 3));
            (z1, z3, self.cfg.has_field_color().then_some(z3), None)
        } else {
            let out = self.forward_points(cx, scene, feats, &geo);
            let mut b = SparseMap::builder(geo.active.len());
            let mut next = geo.active.iter().enumerate().peekable();
            for i in 0..total {
                match next.peek() {
                    Some(&(k, &a)) if a == i => {
                        b.push_row(&[(k, 1.0)]);
                        next.next();
                    }
                    _ => b.push_empty(),
                }
            }
            let scatter = Arc::new(b.build());
            let sg = cx.g.sparse(out.sigma, scatter.clone());
            let cl = cx.g.sparse(out.color, scatter.clone());
            let c0 = out.c0.map(|c| cx.g.sparse(c, scatter.clone()));
            (sg, cl, c0, Some(out))
        };
        let rgba = cx.g.composite(sigma_all, color_all, deltas.clone(), s.max(1));
        let rgba0 = c0_all.map(|c| cx.g.composite(sigma_all, c, deltas.clone(), s.max(1)));
        RayOutputs { rgba, rgba0, points: pts, geometry: geo, deltas, samples: s }
    }

    /// `mean_r |c(r) - gt(r)| + mean_r |c0(r) - gt(r)|` (the second term only
    /// when the model predicts `c0`).
    pub fn loss(&self, cx: &mut Ctx, out: &RayOutputs, gt: Arc<Mat>) -> Var {
        let rgb = cx.g.slice_cols(out.rgba, 0, 3);
        let mut l = cx.g.row_l2_mean(rgb, gt.clone());
        if let Some(r0) = out.rgba0 {
            let rgb0 = cx.g.slice_cols(r0, 0, 3);
            let l0 = cx.g.row_l2_mean(rgb0, gt);
            l = cx.g.add(l, l0);
        }
        l
    }

    /// Renders the full image of `cam` with midpoint samples, in chunks of
    /// `chunk` rays. Pixels whose rays miss the body box are black.
    pub fn render_image(&self, scene: &Scene, cam: &Camera, samples: usize, chunk: usize) -> Rendered {
        let frozen = self.frozen_features(scene);
        self.render_image_with(scene, &frozen, cam, samples, chunk)
    }

    pub fn render_image_with(&self, scene: &Scene, frozen: &FrozenFeatures, cam: &Camera, samples: usize, chunk: usize) -> Rendered {
        let (w, h) = (cam.width, cam.height);
        let k = self.blend_channels(scene.num_views());
        let mut out = Rendered {
            image: RgbImage::new(w, h),
            alpha: GrayImage::new(w, h),
            image0: self.cfg.has_field_color().then(|| RgbImage::new(w, h)),
            blend_maps: (0..k).map(|_| GrayImage::new(w, h)).collect(),
        };
        let rays = rays_hitting(cam, &scene.bbox);
        for part in rays.chunks(chunk.max(1)) {
            let batch: Vec<RaySamples> = part.iter().map(|(_, ray, b)| RaySamples::new(ray.clone(), *b, samples, None)).collect();
            let mut cx = Ctx::new(&self.store, false);
            let feats = frozen.bind(&mut cx);
            let res = self.render_rays(&mut cx, scene, &feats, &batch);
            let rgba = cx.value(res.rgba);
            for (r, (pix, _, _)) in part.iter().enumerate() {
                let row = rgba.row(r);
                out.image.pixels.row_mut(*pix).copy_from_slice(&row[..3]);
                out.alpha.values[*pix] = row[3];
            }
            if let (Some(img0), Some(r0)) = (out.image0.as_mut(), res.rgba0) {
                let v = cx.value(r0);
                for (r, (pix, _, _)) in part.iter().enumerate() {
                    img0.pixels.row_mut(*pix).copy_from_slice(&v.row(r)[..3]);
                }
            }
            if let Some(wv) = res.points.and_then(|p| p.weights) {
                let sig = cx.value(res.points.unwrap().sigma).data().to_vec();
                let bw = cx.value(wv);
                let mut sigma_all = vec![0.0; res.geometry.total];
                for (j, &a) in res.geometry.active.iter().enumerate() {
                    sigma_all[a] = sig[j];
                }
                let mut slot = vec![usize::MAX; res.geometry.total];
                for (j, &a) in res.geometry.active.iter().enumerate() {
                    slot[a] = j;
                }
                let s = res.samples;
                for (r, (pix, _, _)) in part.iter().enumerate() {
                    let range = r * s..(r + 1) * s;
                    let cw = composite_weights(&sigma_all[range.clone()], &res.deltas[range.clone()]);
                    for (i, wi) in range.zip(cw) {
                        if slot[i] != usize::MAX && wi > 0.0 {
                            for (ch, map) in out.blend_maps.iter_mut().enumerate() {
                                map.values[*pix] += wi * bw.get(slot[i], ch);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_observation, Profile, RigConfig, SceneSpec};

    fn fixture(size: usize) -> (Arc<BodyTemplate>, crate::data::MultiViewObservation, SceneSpec) {
        let rig = RigConfig { width: size, height: size, ..Default::default() };
        let spec = SceneSpec::new(11, 12, Profile::Default, &rig, 4).unwrap();
        let obs = render_observation(&spec, 1, &[0, 3, 5]).unwrap();
        (Arc::new(BodyTemplate::capsule_person(&spec.shape)), obs, spec)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            backbone: BackboneConfig { block_channels: vec![8, 8] },
            nerf: NerfConfig { grid_resolution: 12, head_width: 16, ..NerfConfig::default() },
            blend_width: 16,
            blend_layers: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rejects_contradictory_flags() {
        let cfg = ModelConfig { disable_ibr: true, disable_body_nerf: true, ..ModelConfig::default() };
        assert!(matches!(Model::new(cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn ablation_flags_drop_subnetworks() {
        let names = |cfg: ModelConfig| -> Vec<String> {
            let m = Model::new(cfg, 0).unwrap();
            m.store.ids().map(|id| m.store.name(id).to_string()).collect()
        };
        let has = |ns: &[String], p: &str| ns.iter().any(|n| n.starts_with(p));
        let full = names(small_cfg());
        for p in ["diffusion.", "attention.", "density.", "color.", "blend.", "backbone."] {
            assert!(has(&full, p), "{p}");
        }
        let no_ibr = names(ModelConfig { disable_ibr: true, ..small_cfg() });
        assert!(!has(&no_ibr, "blend.") && has(&no_ibr, "color."));
        let no_nerf = names(ModelConfig { disable_body_nerf: true, ..small_cfg() });
        assert!(!has(&no_nerf, "diffusion.") && !has(&no_nerf, "attention.") && !has(&no_nerf, "color."));
        assert!(has(&no_nerf, "blend.in_view") && !has(&no_nerf, "blend.channel0"));
        let avg = names(ModelConfig { blend_mode: BlendMode::SimpleAvg, ..small_cfg() });
        assert!(!has(&avg, "blend."));
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let (tpl, obs, spec) = fixture(32);
        let model = Model::new(small_cfg(), 3).unwrap();
        let scene = model.scene(tpl, &obs.pose, None, &obs.views).unwrap();
        let a = model.render_image(&scene, &spec.cameras[1], 8, 64);
        let b = model.render_image(&scene, &spec.cameras[1], 8, 64);
        assert_eq!(a.image.pixels, b.image.pixels);
        assert!(a.alpha.values.iter().any(|&v| v > 0.0));
        assert!(a.alpha.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.image.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.blend_maps.len(), 4);
        // Blend maps are compositing-weighted partitions of unity.
        for p in 0..32 * 32 {
            let s: f64 = a.blend_maps.iter().map(|m| m.values[p]).sum();
            assert!((s - a.alpha.values[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn camera_missing_the_body_renders_background() {
        let (tpl, obs, spec) = fixture(32);
        let model = Model::new(small_cfg(), 3).unwrap();
        let scene = model.scene(tpl, &obs.pose, None, &obs.views).unwrap();
        let cam = &spec.cameras[0];
        let away = Camera::look_at(cam.center(), cam.center() * 2.0, Vec3::y(), cam.intrinsics, cam.width, cam.height).unwrap();
        let r = model.render_image(&scene, &away, 8, 64);
        assert!(r.image.pixels.data().iter().all(|&v| v == 0.0));
        assert!(r.alpha.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_target_pose_matches_novel_view() {
        let (tpl, obs, spec) = fixture(32);
        let model = Model::new(small_cfg(), 5).unwrap();
        let nv = model.scene(tpl.clone(), &obs.pose, None, &obs.views).unwrap();
        let an = model.scene(tpl, &obs.pose, Some(&obs.pose.clone()), &obs.views).unwrap();
        let a = model.render_image(&nv, &spec.cameras[2], 8, 64);
        let b = model.render_image(&an, &spec.cameras[2], 8, 64);
        assert!(a.image.pixels.max_abs_diff(&b.image.pixels) <= 1e-5);
    }

    #[test]
    fn loss_reduction_examples() {
        let model = Model::new(small_cfg(), 0).unwrap();
        let mut cx = Ctx::new(&model.store, false);
        let gt = Mat::from_rows(&[vec![0.2, 0.4, 0.6], vec![0.0, 0.1, 0.9]]);
        let with_alpha = |m: &Mat, off: f64| Mat::from_rows(&(0..m.rows()).map(|r| m.row(r).iter().map(|v| v + off).chain([1.0]).collect()).collect::<Vec<_>>());
        let rgba = cx.constant(with_alpha(&gt, 0.0));
        let rgba0 = cx.constant(with_alpha(&gt, 0.1));
        let out = RayOutputs { rgba, rgba0: Some(rgba0), points: None, geometry: QueryGeometry::default(), deltas: Arc::new(vec![]), samples: 0 };
        let l = model.loss(&mut cx, &out, Arc::new(gt.clone()));
        assert!((cx.value(l).get(0, 0) - 3f64.sqrt() * 0.1).abs() < 1e-12);
        let perfect = RayOutputs { rgba0: Some(rgba), ..out.clone() };
        let l = model.loss(&mut cx, &perfect, Arc::new(gt.clone()));
        assert_eq!(cx.value(l).get(0, 0), 0.0);
        let neg = RayOutputs { rgba0: Some(cx.constant(with_alpha(&gt, -0.1))), ..out };
        let l = model.loss(&mut cx, &neg, Arc::new(gt));
        assert!((cx.value(l).get(0, 0) - 3f64.sqrt() * 0.1).abs() < 1e-12);
    }
}
