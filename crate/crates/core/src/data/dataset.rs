//! Dataset generation, on-disk layout and loading.
//!
//! ```text
//! <root>/manifest.json
//! <root>/cameras.txt
//! <root>/frames/<identity>/<frame>/<cam>.png
//! <root>/frames/<identity>/<frame>/mask_<cam>.png
//! <root>/body/<identity>/<frame>.txt
//! ```
//! Frames are zero-padded to 3 digits and cameras to 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::body::{BodyPose, BodyTemplate, PosedBody, ShapeParams};
use crate::geometry::Camera;
use crate::imaging::{GrayImage, RgbImage};

use super::formats::{parse_body, parse_cameras, write_body, write_cameras};
use super::raster::render_ground_truth;
use super::scene::{identity_seeds, Profile, RigConfig, SceneSpec};
use super::DataError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub frames: usize,
    /// Frames `0..train_frames` are training poses, the rest are held out.
    pub train_frames: usize,
    pub rig: RigConfig,
    /// Cameras used as inputs at evaluation time; ordered so that prefixes
    /// give the 1- and 2-view settings.
    pub source_cameras: Vec<usize>,
    pub seed: u64,
    pub profile: Profile,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_identities: 8,
            test_identities: 2,
            frames: 30,
            train_frames: 20,
            rig: RigConfig::default(),
            source_cameras: vec![0, 3, 5],
            seed: 0,
            profile: Profile::Default,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub name: String,
    pub identity_seed: u64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub identities: Vec<IdentityEntry>,
    pub train_identities: Vec<String>,
    pub test_identities: Vec<String>,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    pub num_cameras: usize,
    pub source_cameras: Vec<usize>,
    pub target_cameras: Vec<usize>,
    pub rig: RigConfig,
}

impl Manifest {
    pub fn summary(&self) -> String {
        format!(
            "{} identities ({} train, {} test), {} frames ({} train poses, {} test poses), {} cameras (sources {:?}, targets {:?}), {}x{}, profile {:?}",
            self.identities.len(),
            self.train_identities.len(),
            self.test_identities.len(),
            self.num_frames,
            self.train_frames.len(),
            self.test_frames.len(),
            self.num_cameras,
            self.source_cameras,
            self.target_cameras,
            self.width,
            self.height,
            self.profile
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn frame_dir(root: &Path, id: &str, frame: usize) -> PathBuf {
    root.join("frames").join(id).join(format!("{frame:03}"))
}

fn body_path(root: &Path, id: &str, frame: usize) -> PathBuf {
    root.join("body").join(id).join(format!("{frame:03}.txt"))
}

fn validate(cfg: &DatasetConfig) -> Result<(), DataError> {
    let bad = |m: String| Err(DataError::InvalidSpec(m));
    if cfg.train_identities == 0 || cfg.test_identities == 0 {
        return bad("need at least one train and one test identity".into());
    }
    if cfg.train_frames == 0 || cfg.train_frames >= cfg.frames {
        return bad(format!("train_frames must be in 1..{}, got {}", cfg.frames, cfg.train_frames));
    }
    if cfg.source_cameras.is_empty() || cfg.source_cameras.iter().any(|&c| c >= cfg.rig.cameras) {
        return bad(format!("source cameras {:?} must be non-empty indices below {}", cfg.source_cameras, cfg.rig.cameras));
    }
    if cfg.source_cameras.len() >= cfg.rig.cameras {
        return bad("at least one camera must remain as a target".into());
    }
    Ok(())
}

/// Renders every identity, frame and camera and writes the dataset. Refuses
/// to write into a non-empty directory unless `overwrite` is set.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path, overwrite: bool) -> Result<Manifest, DataError> {
    validate(cfg)?;
    if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        if !overwrite {
            return Err(DataError::NotEmpty(out.display().to_string()));
        }
        for sub in ["frames", "body", "manifest.json", "cameras.txt"] {
            let p = out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let n_ids = cfg.train_identities + cfg.test_identities;
    let identities: Vec<IdentityEntry> = (0..n_ids)
        .map(|i| {
            let (identity_seed, texture_seed) = identity_seeds(cfg.seed, cfg.profile, i);
            IdentityEntry { name: format!("id{i:02}"), identity_seed, texture_seed }
        })
        .collect();
    let cameras = cfg.rig.build()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        profile: cfg.profile,
        seed: cfg.seed,
        width: cfg.rig.width,
        height: cfg.rig.height,
        num_frames: cfg.frames,
        train_identities: identities[..cfg.train_identities].iter().map(|e| e.name.clone()).collect(),
        test_identities: identities[cfg.train_identities..].iter().map(|e| e.name.clone()).collect(),
        identities: identities.clone(),
        train_frames: (0..cfg.train_frames).collect(),
        test_frames: (cfg.train_frames..cfg.frames).collect(),
        num_cameras: cfg.rig.cameras,
        source_cameras: cfg.source_cameras.clone(),
        target_cameras: (0..cfg.rig.cameras).filter(|c| !cfg.source_cameras.contains(c)).collect(),
        rig: cfg.rig.clone(),
    };
    let cam_path = out.join("cameras.txt");
    fs::write(&cam_path, write_cameras(&cameras)).map_err(io_err(&cam_path))?;
    for entry in &identities {
        let spec = SceneSpec::new(entry.identity_seed, entry.texture_seed, cfg.profile, &cfg.rig, cfg.frames)?;
        let template = BodyTemplate::capsule_person(&spec.shape);
        let faces = Arc::new(template.faces.clone());
        let bdir = out.join("body").join(&entry.name);
        fs::create_dir_all(&bdir).map_err(io_err(&bdir))?;
        for (f, pose) in spec.poses.iter().enumerate() {
            let bp = body_path(out, &entry.name, f);
            fs::write(&bp, write_body(pose, &spec.shape)).map_err(io_err(&bp))?;
            let body = PosedBody::new(&template, &faces, pose)?;
            let dir = frame_dir(out, &entry.name, f);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (c, cam) in spec.cameras.iter().enumerate() {
                let (img, mask) = render_ground_truth(&spec, &template, &body, cam);
                img.save_png(&dir.join(format!("{c:02}.png")))?;
                let m = GrayImage { width: cam.width, height: cam.height, values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() };
                m.save_png(&dir.join(format!("mask_{c:02}.png")))?;
            }
        }
    }
    let mpath = out.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// One source view of an observation. The image is masked (black background).
#[derive(Clone, Debug)]
pub struct SourceView {
    pub camera_index: usize,
    pub camera: Camera,
    pub image: RgbImage,
    pub mask: Vec<bool>,
}

/// Source views of one identity at one time instant with its body fit.
#[derive(Clone, Debug)]
pub struct MultiViewObservation {
    pub identity: String,
    pub frame: usize,
    pub pose: BodyPose,
    pub shape: ShapeParams,
    pub views: Vec<SourceView>,
}

/// Read-only handle to a dataset on disk. Images are loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let mpath = root.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Format { path: mpath.display().to_string(), message: e.to_string() })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DataError::Format {
                path: mpath.display().to_string(),
                message: format!("format version {} is not supported (expected {FORMAT_VERSION})", manifest.format_version),
            });
        }
        let cpath = root.join("cameras.txt");
        let text = fs::read_to_string(&cpath).map_err(io_err(&cpath))?;
        let cameras = parse_cameras(&text).map_err(|message| DataError::Format { path: cpath.display().to_string(), message })?;
        if cameras.len() != manifest.num_cameras {
            return Err(DataError::Format { path: cpath.display().to_string(), message: format!("{} cameras, manifest says {}", cameras.len(), manifest.num_cameras) });
        }
        Ok(Self { root: root.to_path_buf(), manifest, cameras })
    }

    fn check(&self, id: &str, frame: usize) -> Result<(), DataError> {
        if !self.manifest.identities.iter().any(|e| e.name == id) {
            return Err(DataError::Missing(format!("identity `{id}` is not in the manifest")));
        }
        if frame >= self.manifest.num_frames {
            return Err(DataError::Missing(format!("frame {frame} of `{id}` does not exist (dataset has {} frames)", self.manifest.num_frames)));
        }
        Ok(())
    }

    fn check_cam(&self, cam: usize) -> Result<(), DataError> {
        if cam >= self.cameras.len() {
            return Err(DataError::Missing(format!("camera {cam} does not exist (dataset has {} cameras)", self.cameras.len())));
        }
        Ok(())
    }

    pub fn body(&self, id: &str, frame: usize) -> Result<(BodyPose, ShapeParams), DataError> {
        self.check(id, frame)?;
        let p = body_path(&self.root, id, frame);
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let (pose, shape) = parse_body(&text).map_err(|message| DataError::Format { path: p.display().to_string(), message })?;
        let shape = shape.ok_or_else(|| DataError::Format { path: p.display().to_string(), message: "missing shape record".into() })?;
        Ok((pose, shape))
    }

    /// Masked image (background zeroed) and mask.
    pub fn view(&self, id: &str, frame: usize, cam: usize) -> Result<(RgbImage, Vec<bool>), DataError> {
        self.check(id, frame)?;
        self.check_cam(cam)?;
        let dir = frame_dir(&self.root, id, frame);
        let mut img = RgbImage::load_png(&dir.join(format!("{cam:02}.png")))?;
        let mask: Vec<bool> = GrayImage::load_png(&dir.join(format!("mask_{cam:02}.png")))?.values.iter().map(|&v| v > 0.5).collect();
        if mask.len() != img.width * img.height {
            return Err(DataError::Format { path: dir.display().to_string(), message: "mask and image sizes differ".into() });
        }
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                img.pixels.row_mut(i).fill(0.0);
            }
        }
        Ok((img, mask))
    }

    pub fn load_observation(&self, id: &str, frame: usize, views: &[usize]) -> Result<MultiViewObservation, DataError> {
        if views.is_empty() {
            return Err(DataError::Missing("an observation needs at least one source view".into()));
        }
        let (pose, shape) = self.body(id, frame)?;
        let views = views
            .iter()
            .map(|&c| {
                let (image, mask) = self.view(id, frame, c)?;
                Ok(SourceView { camera_index: c, camera: self.cameras[c].clone(), image, mask })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(MultiViewObservation { identity: id.to_string(), frame, pose, shape, views })
    }
}

/// Renders an observation in memory, quantized exactly as it would be stored.
pub fn render_observation(spec: &SceneSpec, frame: usize, views: &[usize]) -> Result<MultiViewObservation, DataError> {
    let pose = spec.poses.get(frame).ok_or_else(|| DataError::Missing(format!("frame {frame} is not in the scene")))?.clone();
    let template = BodyTemplate::capsule_person(&spec.shape);
    let faces = Arc::new(template.faces.clone());
    let body = PosedBody::new(&template, &faces, &pose)?;
    let views = views
        .iter()
        .map(|&c| {
            let camera = spec.cameras.get(c).ok_or_else(|| DataError::Missing(format!("camera {c} is not in the rig")))?.clone();
            let (image, mask) = render_ground_truth(spec, &template, &body, &camera);
            Ok(SourceView { camera_index: c, camera, image: image.quantized(), mask })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(MultiViewObservation { identity: format!("seed{}", spec.identity_seed), frame, pose, shape: spec.shape, views })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            train_identities: 2,
            test_identities: 1,
            frames: 3,
            train_frames: 2,
            rig: RigConfig { width: 32, height: 32, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn generate_write_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let m = generate_dataset(&cfg, dir.path(), false).unwrap();
        let pngs = walk_count(&dir.path().join("frames"));
        assert_eq!(pngs, 3 * 3 * 8 * 2);
        assert!(m.train_identities.iter().all(|t| !m.test_identities.contains(t)));
        assert_eq!(m.target_cameras, vec![1, 2, 4, 6, 7]);

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let obs = ds.load_observation("id01", 1, &[0, 3, 5]).unwrap();
        assert_eq!(obs.views.len(), 3);
        // Reload matches a fresh render exactly.
        let e = &m.identities[1];
        let spec = SceneSpec::new(e.identity_seed, e.texture_seed, cfg.profile, &cfg.rig, cfg.frames).unwrap();
        assert_eq!(obs.pose, spec.poses[1]);
        assert_eq!(obs.shape, spec.shape);
        let t = BodyTemplate::capsule_person(&spec.shape);
        let body = PosedBody::new(&t, &Arc::new(t.faces.clone()), &spec.poses[1]).unwrap();
        let (img, mask) = render_ground_truth(&spec, &t, &body, &spec.cameras[3]);
        assert_eq!(obs.views[1].image, img);
        assert_eq!(obs.views[1].mask, mask);
        for (i, &mk) in obs.views[0].mask.iter().enumerate() {
            if !mk {
                assert_eq!(obs.views[0].image.pixels.row(i), &[0.0; 3]);
            }
        }

        assert!(matches!(ds.load_observation("id01", 1, &[9]), Err(DataError::Missing(_))));
        assert!(matches!(ds.load_observation("id01", 7, &[0]), Err(DataError::Missing(_))));
        assert!(matches!(ds.load_observation("nobody", 0, &[0]), Err(DataError::Missing(_))));
        assert!(matches!(generate_dataset(&cfg, dir.path(), false), Err(DataError::NotEmpty(_))));
        generate_dataset(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = DatasetConfig { train_identities: 1, frames: 2, train_frames: 1, ..tiny() };
        generate_dataset(&cfg, a.path(), false).unwrap();
        generate_dataset(&cfg, b.path(), false).unwrap();
        for rel in ["manifest.json", "cameras.txt", "body/id00/001.txt", "frames/id01/001/04.png", "frames/id00/000/mask_02.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    fn walk_count(p: &Path) -> usize {
        fs::read_dir(p)
            .unwrap()
            .map(|e| {
                let e = e.unwrap().path();
                if e.is_dir() {
                    walk_count(&e)
                } else {
                    usize::from(e.extension().is_some_and(|x| x == "png"))
                }
            })
            .sum()
    }
}
