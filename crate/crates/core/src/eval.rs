//! Image metrics, evaluation protocols and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{interpolate_scalar, BodyTemplate, SurfaceQuery};
use crate::data::{DataError, Dataset, Profile};
use crate::imaging::{GrayImage, ImageIoError, RgbImage};
use crate::model::{Model, ModelError, Rendered, Scene};
use crate::render::bbox_crop;

pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric over an empty region")]
    EmptyRegion,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("split mismatch: {0}")]
    Split(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

/// Inclusive pixel rectangle `(x0, y0, x1, y1)`.
pub type Crop = (usize, usize, usize, usize);

fn check_sizes(a: &RgbImage, b: &RgbImage) -> Result<(), EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::SizeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Copy of the pixels inside `crop`.
pub fn crop_image(img: &RgbImage, (x0, y0, x1, y1): Crop) -> RgbImage {
    let mut out = RgbImage::new(x1 + 1 - x0, y1 + 1 - y0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.set(x - x0, y - y0, img.get(x, y));
        }
    }
    out
}

/// `-10 log10(MSE)` over all channels of the pixels in `crop` (whole image
/// when `None`), capped at [`PSNR_CAP`].
pub fn psnr(pred: &RgbImage, gt: &RgbImage, crop: Option<Crop>) -> Result<f64, EvalError> {
    check_sizes(pred, gt)?;
    let (x0, y0, x1, y1) = crop.unwrap_or((0, 0, pred.width.wrapping_sub(1), pred.height.wrapping_sub(1)));
    if pred.width == 0 || pred.height == 0 || x1 < x0 || y1 < y0 || x1 >= pred.width || y1 >= pred.height {
        return Err(EvalError::EmptyRegion);
    }
    let mut se = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (p, q) = (pred.get(x, y), gt.get(x, y));
            se += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
        }
    }
    let mse = se / (3 * (x1 + 1 - x0) * (y1 + 1 - y0)) as f64;
    Ok(if mse <= 10f64.powf(-PSNR_CAP / 10.0) { PSNR_CAP } else { -10.0 * mse.log10() })
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as f64;
    let g: Vec<f64> = (0..=2 * SSIM_RADIUS).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * tmp[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, data range 1)
/// averaged over every window lying fully inside the image, then over the
/// three channels.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64, EvalError> {
    check_sizes(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let n = 2 * SSIM_RADIUS + 1;
    if h < n || w < n {
        return Err(EvalError::EmptyRegion);
    }
    let k = gaussian_taps();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let a: Vec<f64> = (0..h * w).map(|i| pred.pixels.get(i, ch)).collect();
        let b: Vec<f64> = (0..h * w).map(|i| gt.pixels.get(i, ch)).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (ma, oh, ow) = filter_valid(&a, h, w, &k);
        let (mb, _, _) = filter_valid(&b, h, w, &k);
        let (saa, _, _) = filter_valid(&prod(&a, &a), h, w, &k);
        let (sbb, _, _) = filter_valid(&prod(&b, &b), h, w, &k);
        let (sab, _, _) = filter_valid(&prod(&a, &b), h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (va, vb, cov) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
            acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NovelViewUnseenId,
    NovelViewSeenIdUnseenPose,
    PoseAnimationUnseenId,
    CrossDomain,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::NovelViewUnseenId, Protocol::NovelViewSeenIdUnseenPose, Protocol::PoseAnimationUnseenId, Protocol::CrossDomain];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::NovelViewUnseenId => "novel_view_unseen_id",
            Protocol::NovelViewSeenIdUnseenPose => "novel_view_seen_id_unseen_pose",
            Protocol::PoseAnimationUnseenId => "pose_animation_unseen_id",
            Protocol::CrossDomain => "cross_domain",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Protocol::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            format!("unknown protocol `{s}` (expected one of {})", Protocol::ALL.map(Protocol::name).join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of source views, taken as a prefix of the dataset's source cameras.
    pub views: usize,
    /// Every `frame_stride`-th eligible frame is evaluated.
    pub frame_stride: usize,
    /// Every `camera_stride`-th target camera is evaluated.
    pub camera_stride: usize,
    /// Cap on evaluated identities per protocol (0 = all).
    pub max_identities: usize,
    pub samples_per_ray: usize,
    pub chunk_rays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { views: 3, frame_stride: 5, camera_stride: 2, max_identities: 0, samples_per_ray: 64, chunk_rays: 256 }
    }
}

/// One evaluated image: source views come from `reference_frame`, the
/// target body pose and ground truth from `frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub identity: String,
    pub reference_frame: usize,
    pub frame: usize,
    pub camera: usize,
}

fn pick<T: Clone>(v: &[T], stride: usize) -> Vec<T> {
    v.iter().step_by(stride.max(1)).cloned().collect()
}

/// The (identity, reference frame, frame, camera) tuples of a protocol.
pub fn protocol_items(ds: &Dataset, protocol: Protocol, cfg: &EvalConfig) -> Result<Vec<EvalItem>, EvalError> {
    let m = &ds.manifest;
    let shifted = m.profile == Profile::Shifted;
    match (protocol, shifted) {
        (Protocol::CrossDomain, false) => return Err(EvalError::Split("cross_domain needs a dataset generated with the shifted profile".into())),
        (Protocol::CrossDomain, true) | (_, false) => {}
        (p, true) => return Err(EvalError::Split(format!("{p} needs a default-profile dataset; this one is shifted"))),
    }
    let all_frames: Vec<usize> = (0..m.num_frames).collect();
    let (ids, frames): (Vec<String>, Vec<usize>) = match protocol {
        Protocol::NovelViewUnseenId => (m.test_identities.clone(), all_frames),
        Protocol::NovelViewSeenIdUnseenPose => (m.train_identities.clone(), m.test_frames.clone()),
        Protocol::PoseAnimationUnseenId => (m.test_identities.clone(), m.test_frames.clone()),
        Protocol::CrossDomain => (m.identities.iter().map(|e| e.name.clone()).collect(), all_frames),
    };
    let ids = if cfg.max_identities > 0 { ids.into_iter().take(cfg.max_identities).collect() } else { ids };
    if ids.is_empty() || frames.is_empty() {
        return Err(EvalError::Split(format!("{protocol} has no identities or frames in this dataset")));
    }
    if protocol == Protocol::PoseAnimationUnseenId && m.train_frames.is_empty() {
        return Err(EvalError::Split("pose animation needs reference frames from the training poses".into()));
    }
    let sources = &m.source_cameras;
    let cams: Vec<usize> = pick(&m.target_cameras.iter().copied().filter(|c| !sources.contains(c)).collect::<Vec<_>>(), cfg.camera_stride);
    let mut items = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        for (j, &frame) in pick(&frames, cfg.frame_stride).iter().enumerate() {
            let reference_frame = match protocol {
                Protocol::PoseAnimationUnseenId => m.train_frames[(i * 7 + j * 3) % m.train_frames.len()],
                _ => frame,
            };
            for &camera in &cams {
                items.push(EvalItem { identity: id.clone(), reference_frame, frame, camera });
            }
        }
    }
    Ok(items)
}

/// Source cameras for `views` views.
pub fn source_cameras(ds: &Dataset, views: usize) -> Result<Vec<usize>, EvalError> {
    let s = &ds.manifest.source_cameras;
    if views == 0 || views > s.len() {
        return Err(EvalError::Split(format!("{views} source views requested; the dataset defines {}", s.len())));
    }
    Ok(s[..views].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub item: EvalItem,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub checkpoint: String,
    pub config_hash: String,
    pub views: usize,
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn new(protocol: Protocol, checkpoint: &str, config_hash: &str, views: usize, images: Vec<ImageScore>) -> Self {
        let n = images.len().max(1) as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self { protocol, checkpoint: checkpoint.to_string(), config_hash: config_hash.to_string(), views, images, mean_psnr, mean_ssim }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol     {}", self.protocol);
        let _ = writeln!(s, "checkpoint   {}", self.checkpoint);
        let _ = writeln!(s, "config hash  {}", self.config_hash);
        let _ = writeln!(s, "views        {}", self.views);
        let _ = writeln!(s, "images       {}", self.images.len());
        let _ = writeln!(s, "mean PSNR    {:.3} dB", self.mean_psnr);
        let _ = writeln!(s, "mean SSIM    {:.4}", self.mean_ssim);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,identity,reference_frame,frame,camera,psnr,ssim\n");
        for r in &self.images {
            let i = &r.item;
            let _ = writeln!(s, "{},{},{},{},{},{:.6},{:.6}", self.protocol, i.identity, i.reference_frame, i.frame, i.camera, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{},mean,,,,{:.6},{:.6}", self.protocol, self.mean_psnr, self.mean_ssim);
        s
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [("report.txt", self.to_text()), ("report.csv", self.to_csv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

/// Side-by-side prediction, ground truth and blend-weight maps.
pub fn comparison_grid(rendered: &Rendered, gt: &RgbImage) -> RgbImage {
    let maps: Vec<RgbImage> = rendered.blend_maps.iter().map(GrayImage::to_rgb).collect();
    let mut row: Vec<&RgbImage> = vec![&rendered.image, gt];
    row.extend(maps.iter());
    RgbImage::hstack(&row)
}

/// Prepares the scene of an item: sources from the reference frame, body in
/// the target frame's pose.
pub fn item_scene(model: &Model, ds: &Dataset, item: &EvalItem, sources: &[usize]) -> Result<Scene, EvalError> {
    let obs = ds.load_observation(&item.identity, item.reference_frame, sources)?;
    let template = Arc::new(BodyTemplate::capsule_person(&obs.shape));
    let target = if item.frame == item.reference_frame { None } else { Some(ds.body(&item.identity, item.frame)?.0) };
    Ok(model.scene(template, &obs.pose, target.as_ref(), &obs.views)?)
}

/// Renders and scores every item of a protocol. When `image_dir` is given,
/// a comparison grid per image is written there.
pub fn run_protocol(
    model: &Model,
    ds: &Dataset,
    protocol: Protocol,
    cfg: &EvalConfig,
    checkpoint: &str,
    config_hash: &str,
    image_dir: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    let items = protocol_items(ds, protocol, cfg)?;
    let sources = source_cameras(ds, cfg.views)?;
    if let Some(d) = image_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut scores = Vec::with_capacity(items.len());
    let mut cached: Option<((String, usize, usize), Scene, crate::model::FrozenFeatures)> = None;
    for item in &items {
        let key = (item.identity.clone(), item.reference_frame, item.frame);
        if cached.as_ref().is_none_or(|c| c.0 != key) {
            let scene = item_scene(model, ds, item, &sources)?;
            let frozen = model.frozen_features(&scene);
            cached = Some((key, scene, frozen));
        }
        let (_, scene, frozen) = cached.as_ref().expect("scene prepared above");
        let cam = &ds.cameras[item.camera];
        let rendered = model.render_image_with(scene, frozen, cam, cfg.samples_per_ray, cfg.chunk_rays);
        let (gt, _) = ds.view(&item.identity, item.frame, item.camera)?;
        let (p, s) = score(&rendered.image, &gt, cam, scene)?;
        if let Some(d) = image_dir {
            let name = format!("{}_f{:03}_r{:03}_c{:02}.png", item.identity, item.frame, item.reference_frame, item.camera);
            comparison_grid(&rendered, &gt).save_png(&d.join(name))?;
        }
        scores.push(ImageScore { item: item.clone(), psnr: p, ssim: s });
    }
    Ok(EvalReport::new(protocol, checkpoint, config_hash, cfg.views, scores))
}

/// PSNR and SSIM on the projection of the target body box.
pub fn score(pred: &RgbImage, gt: &RgbImage, cam: &crate::geometry::Camera, scene: &Scene) -> Result<(f64, f64), EvalError> {
    let crop = bbox_crop(cam, &scene.bbox).ok_or(EvalError::EmptyRegion)?;
    let p = psnr(pred, gt, Some(crop))?;
    let s = ssim(&crop_image(pred, crop), &crop_image(gt, crop))?;
    Ok((p, s))
}

/// Mean ground-truth color over the body-box crops of the training views
/// (training identities and frames, every `stride`-th frame).
pub fn training_mean_color(ds: &Dataset, stride: usize) -> Result<[f64; 3], EvalError> {
    let m = &ds.manifest;
    let (mut sum, mut n) = ([0.0; 3], 0usize);
    for id in &m.train_identities {
        for &f in pick(&m.train_frames, stride).iter() {
            let (pose, shape) = ds.body(id, f)?;
            let tpl = BodyTemplate::capsule_person(&shape);
            let body = crate::body::PosedBody::new(&tpl, &Arc::new(tpl.faces.clone()), &pose).map_err(|e| EvalError::Model(e.into()))?;
            for (c, cam) in ds.cameras.iter().enumerate() {
                let Some((x0, y0, x1, y1)) = bbox_crop(cam, &body.bbox()) else { continue };
                let (img, _) = ds.view(id, f, c)?;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let p = img.get(x, y);
                        (0..3).for_each(|ch| sum[ch] += p[ch]);
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyRegion);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Scores a constant-color prediction on the items of a protocol.
pub fn constant_color_report(ds: &Dataset, protocol: Protocol, cfg: &EvalConfig, color: [f64; 3]) -> Result<EvalReport, EvalError> {
    let items = protocol_items(ds, protocol, cfg)?;
    let mut scores = Vec::with_capacity(items.len());
    for item in &items {
        let (pose, shape) = ds.body(&item.identity, item.frame)?;
        let tpl = BodyTemplate::capsule_person(&shape);
        let body = crate::body::PosedBody::new(&tpl, &Arc::new(tpl.faces.clone()), &pose).map_err(|e| EvalError::Model(e.into()))?;
        let cam = &ds.cameras[item.camera];
        let crop = bbox_crop(cam, &body.bbox()).ok_or(EvalError::EmptyRegion)?;
        let (gt, _) = ds.view(&item.identity, item.frame, item.camera)?;
        let mut pred = RgbImage::new(gt.width, gt.height);
        for y in 0..gt.height {
            for x in 0..gt.width {
                pred.set(x, y, color);
            }
        }
        let p = psnr(&pred, &gt, Some(crop))?;
        let s = ssim(&crop_image(&pred, crop), &crop_image(&gt, crop))?;
        scores.push(ImageScore { item: item.clone(), psnr: p, ssim: s });
    }
    Ok(EvalReport::new(protocol, "mean-color", "", cfg.views, scores))
}

/// Mean channel-0 blend weight (normalized by opacity) over rendered
/// pixels, split by whether the first surface point along the pixel ray is
/// seen by none of the source views.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BlendVisibilityStat {
    pub occluded_sum: f64,
    pub occluded_pixels: usize,
    pub visible_sum: f64,
    pub visible_pixels: usize,
}

impl BlendVisibilityStat {
    pub fn occluded_mean(&self) -> f64 {
        self.occluded_sum / self.occluded_pixels.max(1) as f64
    }

    pub fn visible_mean(&self) -> f64 {
        self.visible_sum / self.visible_pixels.max(1) as f64
    }

    pub fn merge(&mut self, o: &Self) {
        self.occluded_sum += o.occluded_sum;
        self.occluded_pixels += o.occluded_pixels;
        self.visible_sum += o.visible_sum;
        self.visible_pixels += o.visible_pixels;
    }
}

/// Accumulates [`BlendVisibilityStat`] for one rendered view. Pixels with
/// opacity below `min_alpha` or no surface hit are skipped.
pub fn blend_visibility_stat(scene: &Scene, cam: &crate::geometry::Camera, rendered: &Rendered, min_alpha: f64) -> BlendVisibilityStat {
    let mut st = BlendVisibilityStat::default();
    if rendered.blend_maps.len() != scene.num_views() + 1 {
        return st;
    }
    let faces = &scene.deform.reference.mesh.faces;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let pix = y * cam.width + x;
            let a = rendered.alpha.values[pix];
            if a < min_alpha {
                continue;
            }
            let ray = cam.pixel_ray(x as f64, y as f64);
            let Some((t, face, bary)) = scene.deform.target.mesh.first_hit(&ray) else { continue };
            let xs = ray.point_at(t);
            let q = if scene.deform.identity {
                SurfaceQuery { point: xs, face, bary, distance: 0.0 }
            } else {
                match scene.deform.deform(&xs, &ray.dir) {
                    Ok(d) => scene.deform.reference.mesh.nearest_surface(&d.point),
                    Err(_) => continue,
                }
            };
            let seen = scene.cams.iter().zip(&scene.visibility).any(|(c, vis)| {
                let inside = c.project(&q.point).is_ok_and(|(u, v)| c.in_image(u, v));
                inside && interpolate_scalar(&q, faces, vis) > 0.0
            });
            let w0 = rendered.blend_maps[0].values[pix] / a;
            if seen {
                st.visible_sum += w0;
                st.visible_pixels += 1;
            } else {
                st.occluded_sum += w0;
                st.occluded_pixels += 1;
            }
        }
    }
    st
}

/// Output directory layout for reports of `protocol` under `root`.
pub fn report_dir(root: &Path, protocol: Protocol) -> PathBuf {
    root.join(protocol.name())
}
