#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use avatar_core::backbone::BackboneConfig;
use avatar_core::body::BodyTemplate;
use avatar_core::data::{generate_dataset, render_observation, DatasetConfig, MultiViewObservation, Profile, RigConfig, SceneSpec};
use avatar_core::model::{Model, ModelConfig, RaySamples, Scene};
use avatar_core::nerf::NerfConfig;
use avatar_core::nn::Ctx;
use avatar_core::render::rays_hitting;
use avatar_core::train::TrainConfig;
use avatar_tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        backbone: BackboneConfig { block_channels: vec![8, 8] },
        nerf: NerfConfig { grid_resolution: 12, head_width: 16, ..NerfConfig::default() },
        blend_width: 16,
        blend_layers: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_data_config() -> DatasetConfig {
    DatasetConfig {
        train_identities: 2,
        test_identities: 1,
        frames: 4,
        train_frames: 3,
        rig: RigConfig { width: 32, height: 32, ..RigConfig::default() },
        ..DatasetConfig::default()
    }
}

pub fn tiny_dataset(dir: &Path) {
    generate_dataset(&tiny_data_config(), dir, true).unwrap();
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig { rays_per_batch: 32, samples_per_ray: 8, epochs: 2, steps_per_epoch: 3, model: small_model(), ..TrainConfig::default() }
}

/// One observation of a generated identity rendered in memory.
pub fn fixture(size: usize) -> (Arc<BodyTemplate>, MultiViewObservation, SceneSpec) {
    let rig = RigConfig { width: size, height: size, ..Default::default() };
    let spec = SceneSpec::new(11, 12, Profile::Default, &rig, 4).unwrap();
    let obs = render_observation(&spec, 1, &[0, 3, 5]).unwrap();
    (Arc::new(BodyTemplate::capsule_person(&spec.shape)), obs, spec)
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Loss of a fixed micro-batch for the model's current parameters.
fn batch_loss(model: &Model, scene: &Scene, rays: &[RaySamples], target: &Arc<Mat>) -> f64 {
    let mut cx = Ctx::new(&model.store, false);
    let feats = model.features(&mut cx, scene);
    let out = model.render_rays(&mut cx, scene, &feats, rays);
    let l = model.loss(&mut cx, &out, target.clone());
    cx.value(l).get(0, 0)
}

pub struct GradCheck {
    /// `(parameter name, analytic, central difference)` per checked entry.
    pub entries: Vec<(String, f64, f64)>,
    pub max_relative: f64,
    /// Distinct top-level modules covered by the checked entries.
    pub modules: Vec<String>,
}

/// Central differences against reverse-mode gradients of the full loss
/// (encoder, anchoring, diffusion, attention, heads, blending, compositing)
/// on a two-ray micro-batch, for `count` parameter entries spread over all
/// modules with a non-negligible gradient.
pub fn full_path_gradcheck(count: usize, seed: u64) -> GradCheck {
    let (tpl, obs, spec) = fixture(32);
    let mut model = Model::new(small_model(), seed).unwrap();
    let scene = model.scene(tpl, &obs.pose, None, &obs.views).unwrap();
    let cam = &spec.cameras[1];
    let hits = rays_hitting(cam, &scene.bbox);
    // Two rays through the middle of the body box, both with active samples.
    let mut picked = Vec::new();
    let mid = hits.len() / 2;
    for (_, ray, b) in hits[mid..].iter().chain(&hits[..mid]) {
        let rs = RaySamples::new(ray.clone(), *b, 12, None);
        let pts: Vec<_> = rs.t.iter().map(|&t| ray.point_at(t)).collect();
        let dirs = vec![ray.dir; pts.len()];
        if scene.query_geometry(&pts, &dirs).active.len() >= 3 {
            picked.push(rs);
        }
        if picked.len() == 2 {
            break;
        }
    }
    assert_eq!(picked.len(), 2, "no rays through the body");
    let target = Arc::new(Mat::from_rows(&[vec![0.8, 0.3, 0.1], vec![0.2, 0.6, 0.9]]));

    let grads = {
        let mut cx = Ctx::new(&model.store, true);
        let feats = model.features(&mut cx, &scene);
        let out = model.render_rays(&mut cx, &scene, &feats, &picked);
        let l = model.loss(&mut cx, &out, target.clone());
        cx.g.backward_params(l).params().to_vec()
    };

    // Candidate entries grouped by module, then taken round-robin.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut by_module: Vec<(String, Vec<(avatar_tensor::ParamId, usize, f64)>)> = Vec::new();
    for (id, g) in &grads {
        let name = model.store.name(*id).to_string();
        let m = module_of(&name).to_string();
        let cands: Vec<_> = g.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-6).map(|(i, &v)| (*id, i, v)).collect();
        if cands.is_empty() {
            continue;
        }
        match by_module.iter_mut().find(|(k, _)| *k == m) {
            Some((_, v)) => v.extend(cands),
            None => by_module.push((m, cands)),
        }
    }
    let mut chosen = Vec::new();
    'outer: loop {
        let mut progressed = false;
        for (_, c) in by_module.iter_mut() {
            if chosen.len() == count {
                break 'outer;
            }
            if !c.is_empty() {
                chosen.push(c.swap_remove(rng.random_range(0..c.len())));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let h = 1e-6;
    let mut entries = Vec::new();
    let mut max_relative: f64 = 0.0;
    let mut modules: Vec<String> = Vec::new();
    for (id, i, analytic) in chosen {
        let orig = model.store.value(id).data()[i];
        model.store.value_mut(id).data_mut()[i] = orig + h;
        let lp = batch_loss(&model, &scene, &picked, &target);
        model.store.value_mut(id).data_mut()[i] = orig - h;
        let lm = batch_loss(&model, &scene, &picked, &target);
        model.store.value_mut(id).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        max_relative = max_relative.max(rel);
        let name = model.store.name(id).to_string();
        let m = module_of(&name).to_string();
        if !modules.contains(&m) {
            modules.push(m);
        }
        entries.push((format!("{name}[{i}]"), analytic, fd));
    }
    GradCheck { entries, max_relative, modules }
}
