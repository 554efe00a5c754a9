//! Optimization of all model parameters with the two-term photometric loss,
//! checkpoint files and training logs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use avatar_tensor::{Adam, Mat};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyTemplate;
use crate::data::{DataError, Dataset};
use crate::geometry::Camera;
use crate::model::{Model, ModelConfig, ModelError, RaySamples};
use crate::nn::Ctx;
use crate::render::rays_hitting;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} is not a checkpoint file")]
    NotCheckpoint { path: String },
    #[error("checkpoint {path} has format version {found}; this build reads version {expected}")]
    Version { path: String, found: u32, expected: u32 },
    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("non-finite loss at step {step}; offending batch written to {dump}")]
    NonFinite { step: u64, dump: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; each step draws one random observation.
    pub steps_per_epoch: usize,
    /// Source views per training observation.
    pub views: usize,
    /// Fraction of rays drawn from outside the dilated mask (supervised to black).
    pub background_fraction: f64,
    /// Mask dilation radius in pixels.
    pub mask_dilation: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 1024,
            samples_per_ray: 64,
            learning_rate: 5e-4,
            epochs: 30,
            steps_per_epoch: 50,
            views: 3,
            background_fraction: 0.2,
            mask_dilation: 2,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.epochs == 0 || self.steps_per_epoch == 0 || self.views == 0 {
            return bad("rays_per_batch, samples_per_ray, epochs, steps_per_epoch and views must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction must lie in [0, 1)");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One training example: the observation, target view and ray selection.
#[derive(Clone, Debug, Serialize)]
pub struct BatchInfo {
    pub identity: String,
    pub frame: usize,
    pub target_camera: usize,
    pub source_cameras: Vec<usize>,
    pub pixels: Vec<usize>,
}

/// Model, optimizer and sampling state.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

/// Pixels of the mask grown by `r` (Chebyshev distance).
pub fn dilate_mask(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            for yy in y.saturating_sub(r)..(y + r + 1).min(height) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(width) {
                    out[yy * width + xx] = true;
                }
            }
        }
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if n <= pool.len() {
        sample_indices(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&model.store, cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { cfg, model, adam, rng, epoch: 0, step: 0 })
    }

    /// Draws an observation, a target camera, `views` distinct source cameras
    /// other than the target, and the rays of one batch.
    fn draw_batch(&mut self, ds: &Dataset) -> Result<(BatchInfo, Vec<(crate::geometry::Ray, (f64, f64))>, Mat, crate::model::Scene), TrainError> {
        let m = &ds.manifest;
        let ncam = ds.cameras.len();
        if self.cfg.views >= ncam {
            return Err(TrainError::Config(format!("{} source views need at least {} cameras", self.cfg.views, self.cfg.views + 1)));
        }
        if m.train_identities.is_empty() || m.train_frames.is_empty() {
            return Err(TrainError::Config("dataset has no training identities or frames".into()));
        }
        let identity = m.train_identities[self.rng.random_range(0..m.train_identities.len())].clone();
        let frame = m.train_frames[self.rng.random_range(0..m.train_frames.len())];
        let target_camera = self.rng.random_range(0..ncam);
        let others: Vec<usize> = (0..ncam).filter(|&c| c != target_camera).collect();
        let source_cameras = draw(&mut self.rng, &others, self.cfg.views);
        let obs = ds.load_observation(&identity, frame, &source_cameras)?;
        let template = Arc::new(BodyTemplate::capsule_person(&obs.shape));
        let scene = self.model.scene(template, &obs.pose, None, &obs.views)?;
        let (gt, mask) = ds.view(&identity, frame, target_camera)?;
        let cam: &Camera = &ds.cameras[target_camera];
        let dilated = dilate_mask(&mask, cam.width, cam.height, self.cfg.mask_dilation);
        let hits = rays_hitting(cam, &scene.bbox);
        let (fg, bg): (Vec<usize>, Vec<usize>) = (0..hits.len()).partition(|&i| dilated[hits[i].0]);
        let r = self.cfg.rays_per_batch;
        let n_bg = if bg.is_empty() { 0 } else { (r as f64 * self.cfg.background_fraction).round() as usize };
        let n_fg = if fg.is_empty() { 0 } else { r - n_bg };
        let mut picked = draw(&mut self.rng, &fg, n_fg);
        picked.extend(draw(&mut self.rng, &bg, r - picked.len()));
        let pixels: Vec<usize> = picked.iter().map(|&i| hits[i].0).collect();
        let rays = picked.iter().map(|&i| (hits[i].1.clone(), hits[i].2)).collect();
        let target = Mat::from_rows(&pixels.iter().map(|&p| gt.pixels.row(p).to_vec()).collect::<Vec<_>>());
        Ok((BatchInfo { identity, frame, target_camera, source_cameras, pixels }, rays, target, scene))
    }

    /// One optimizer step. Returns the loss before the update.
    pub fn step(&mut self, ds: &Dataset, dump_dir: &Path) -> Result<f64, TrainError> {
        let (info, rays, target, scene) = self.draw_batch(ds)?;
        let s = self.cfg.samples_per_ray;
        let batch: Vec<RaySamples> = rays.into_iter().map(|(ray, b)| RaySamples::new(ray, b, s, Some(&mut self.rng as &mut dyn rand::RngCore))).collect();
        let mut cx = Ctx::new(&self.model.store, true);
        let feats = self.model.features(&mut cx, &scene);
        let out = self.model.render_rays(&mut cx, &scene, &feats, &batch);
        let loss_var = self.model.loss(&mut cx, &out, Arc::new(target));
        let loss = cx.value(loss_var).get(0, 0);
        if !loss.is_finite() {
            fs::create_dir_all(dump_dir).map_err(io_err(dump_dir))?;
            let dump = dump_dir.join(format!("nonfinite_step{}.json", self.step));
            let body = serde_json::json!({ "step": self.step, "epoch": self.epoch, "loss": loss.to_string(), "batch": info });
            fs::write(&dump, serde_json::to_string_pretty(&body).expect("dump serializes")).map_err(io_err(&dump))?;
            return Err(TrainError::NonFinite { step: self.step, dump: dump.display().to_string() });
        }
        let grads = cx.g.backward_params(loss_var);
        self.adam.update(&mut self.model.store, grads.params());
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining epochs, appending `epoch,step,loss` rows to
    /// `out/loss.csv` and writing `out/checkpoint.bin` after every epoch.
    /// `progress` sees `(epoch, mean loss of the epoch)`.
    pub fn run(&mut self, ds: &Dataset, out: &Path, mut progress: impl FnMut(usize, f64)) -> Result<PathBuf, TrainError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let log_path = out.join("loss.csv");
        let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        if log.metadata().map_err(io_err(&log_path))?.len() == 0 {
            writeln!(log, "epoch,step,loss").map_err(io_err(&log_path))?;
        }
        let ckpt = out.join("checkpoint.bin");
        while self.epoch < self.cfg.epochs {
            let mut total = 0.0;
            for _ in 0..self.cfg.steps_per_epoch {
                let l = self.step(ds, out)?;
                total += l;
                writeln!(log, "{},{},{l}", self.epoch, self.step).map_err(io_err(&log_path))?;
            }
            self.epoch += 1;
            self.save(&ckpt)?;
            progress(self.epoch, total / self.cfg.steps_per_epoch as f64);
        }
        if !ckpt.exists() {
            self.save(&ckpt)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let store = &self.model.store;
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos().to_string() },
            params: store.iter().map(|(_, n, m)| ParamHeader { name: n.to_string(), rows: m.rows(), cols: m.cols() }).collect(),
            adam_step: self.adam.step_count(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(json.len() + 24 + 24 * store.numel());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let (m, v) = self.adam.moments();
        for block in [store.iter().map(|(_, _, x)| x).collect::<Vec<_>>(), m.iter().collect(), v.iter().collect()] {
            for mat in block {
                for x in mat.data() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let p = path.display().to_string();
        let corrupt = |message: &str| TrainError::Corrupt { path: p.clone(), message: message.to_string() };
        let mut f = fs::File::open(path).map_err(io_err(path))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(io_err(path))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(TrainError::NotCheckpoint { path: p });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version { path: p, found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| corrupt(&e.to_string()))?;
        let mut trainer = Trainer::new(header.config.clone())?;
        let store = &mut trainer.model.store;
        if store.len() != header.params.len() {
            return Err(corrupt("parameter count does not match the configuration"));
        }
        for ((_, name, m), ph) in store.iter().zip(&header.params) {
            if name != ph.name || m.shape() != (ph.rows, ph.cols) {
                return Err(corrupt(&format!("parameter `{}` does not match the configuration", ph.name)));
            }
        }
        let numel = store.numel();
        if bytes.len() != hend + 3 * numel * 8 {
            return Err(corrupt("payload size does not match the parameter shapes"));
        }
        let mut vals = bytes[hend..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let shapes: Vec<(usize, usize)> = header.params.iter().map(|p| (p.rows, p.cols)).collect();
        let mut read = |shape: (usize, usize)| Mat::from_vec(shape.0, shape.1, vals.by_ref().take(shape.0 * shape.1).collect());
        let ids: Vec<_> = store.ids().collect();
        for (id, &sh) in ids.iter().zip(&shapes) {
            *store.value_mut(*id) = read(sh);
        }
        let m: Vec<Mat> = shapes.iter().map(|&sh| read(sh)).collect();
        let v: Vec<Mat> = shapes.iter().map(|&sh| read(sh)).collect();
        trainer.adam = Adam::restore(header.config.learning_rate, header.adam_step, m, v);
        let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(header.rng.word_pos.parse().map_err(|_| corrupt("bad rng position"))?);
        trainer.rng = rng;
        trainer.epoch = header.epoch;
        trainer.step = header.step;
        Ok(trainer)
    }
}

/// Trains `cfg` in `dir`, resuming from `dir/checkpoint.bin` when it holds
/// a run of the same configuration (possibly already complete). A
/// checkpoint of a different configuration is replaced.
pub fn train_cached(cfg: &TrainConfig, ds: &Dataset, dir: &Path, progress: impl FnMut(usize, f64)) -> Result<Trainer, TrainError> {
    let ckpt = dir.join("checkpoint.bin");
    let mut trainer = match Trainer::load(&ckpt) {
        Ok(t) if t.cfg == *cfg => t,
        _ => {
            let log = dir.join("loss.csv");
            if log.exists() {
                fs::remove_file(&log).map_err(io_err(&log))?;
            }
            Trainer::new(cfg.clone())?
        }
    };
    if trainer.epoch < trainer.cfg.epochs || !ckpt.exists() {
        trainer.run(ds, dir, progress)?;
    }
    Ok(trainer)
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    params: Vec<ParamHeader>,
    adam_step: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = vec![false; 49];
        m[3 * 7 + 3] = true;
        let d = dilate_mask(&m, 7, 7, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 25);
        assert!(d[7 + 1] && !d[0]);
        assert_eq!(dilate_mask(&m, 7, 7, 0), m);
    }

    #[test]
    fn draw_without_and_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool: Vec<usize> = (10..20).collect();
        let mut a = draw(&mut rng, &pool, 10);
        a.sort();
        assert_eq!(a, pool);
        assert_eq!(draw(&mut rng, &pool, 25).len(), 25);
        assert!(draw(&mut rng, &[], 5).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { background_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { views: 0, ..Default::default() }.validate().is_err());
    }
}
