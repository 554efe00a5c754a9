use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use avatar_core::ablation::ablate;
use avatar_core::body::BodyTemplate;
use avatar_core::config::{env_overrides, load, parse_override, RunConfig};
use avatar_core::data::{generate_dataset, parse_body, Dataset};
use avatar_core::eval::{report_dir, run_protocol, Protocol};
use avatar_core::model::{Model, Rendered, Scene};
use avatar_core::render::turntable;
use avatar_core::train::{Trainer, CHECKPOINT_VERSION};

const AFTER_HELP: &str = "\
Evaluation protocols (--protocol):
  novel_view_unseen_id            test identities, all frames, held-out cameras
  novel_view_seen_id_unseen_pose  training identities, held-out frames and cameras
  pose_animation_unseen_id        test identities reposed from a training frame to held-out frames
  cross_domain                    every identity of a shifted-profile dataset

Ablation flags (config keys, set with --set or AVATAR_ environment variables):
  train.model.disable_body_nerf=true           row (a): no body-anchored field
  train.model.disable_ibr=true                 row (b): field color only
  train.model.blend_mode=simple_avg            row (c): uniform blending
  train.model.blend_mode=cosine_weighted       row (d): direction-weighted blending
  train.views=N                                source views per observation

Configuration precedence: defaults < --config file < AVATAR_* environment < --set/flags.
Environment keys use `__` between path segments, e.g. AVATAR_TRAIN__EPOCHS=5.";

#[derive(Parser, Debug)]
#[command(name = "avatar", version, about = "Sparse-view human avatars: synthetic data, training, rendering and evaluation", after_help = AFTER_HELP)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for data generation (generate-data) or training (train, ablate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deterministic execution. Runs are always single-threaded and seeded;
    /// the flag is recorded in the echoed configuration.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// `default`, or `shifted` for the cross-domain set.
        #[arg(long)]
        profile: Option<String>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; resumes a matching checkpoint in the output directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start over even if the output directory holds another run.
        #[arg(long)]
        force: bool,
    },
    /// Render a novel view of an observation.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        camera: usize,
        /// Source cameras, comma separated (default: the dataset's source cameras).
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Also render this many frames on a camera orbit.
        #[arg(long)]
        turntable: Option<usize>,
    },
    /// Repose an observation to the pose in a body file and render it.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        ref_frame: usize,
        /// Body file (same format as the dataset's body/<identity>/<frame>.txt).
        #[arg(long)]
        pose_file: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint under an evaluation protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        out: PathBuf,
        /// Number of source views (prefix of the dataset's source cameras).
        #[arg(long)]
        views: Option<usize>,
        /// Write prediction / ground truth / blend-map grids.
        #[arg(long)]
        images: bool,
    },
    /// Train and evaluate the component ablations and the view-count sweep.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        protocol: Option<Protocol>,
    },
}

fn run_config(cli: &Cli, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend_from_slice(extra);
    let env = env_overrides(std::env::vars());
    Ok(load(cli.config.as_deref(), &env, &overrides)?)
}

fn echo_config(dir: &Path, cfg: &RunConfig, deterministic: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = format!("# effective configuration (hash {}, deterministic {deterministic})\n{}", cfg.hash_hex(), cfg.to_toml());
    fs::write(dir.join("config.toml"), body).with_context(|| format!("writing config into {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let t = Trainer::load(path).with_context(|| format!("loading checkpoint {} (this build reads format version {CHECKPOINT_VERSION})", path.display()))?;
    Ok(t.model)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn scene_for(model: &Model, ds: &Dataset, identity: &str, frame: usize, views: &Option<Vec<usize>>, target: Option<&avatar_core::body::BodyPose>) -> Result<Scene> {
    let cams = views.clone().unwrap_or_else(|| ds.manifest.source_cameras.clone());
    let obs = ds.load_observation(identity, frame, &cams)?;
    let template = Arc::new(BodyTemplate::capsule_person(&obs.shape));
    Ok(model.scene(template, &obs.pose, target, &obs.views)?)
}

fn save_rendered(r: &Rendered, scene: &Scene, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    r.image.save_png(&dir.join(format!("{stem}.png")))?;
    r.alpha.save_png(&dir.join(format!("{stem}_alpha.png")))?;
    if let Some(i0) = &r.image0 {
        i0.save_png(&dir.join(format!("{stem}_c0.png")))?;
    }
    let offset = r.blend_maps.len() - scene.num_views().min(r.blend_maps.len());
    for (k, m) in r.blend_maps.iter().enumerate() {
        let name = if k < offset { format!("{stem}_blend_c0.png") } else { format!("{stem}_blend_view{}.png", k - offset) };
        m.save_png(&dir.join(name))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData { out, profile, force } => {
            let mut extra = Vec::new();
            if let Some(p) = profile {
                extra.push(("data.profile".to_string(), format!("\"{p}\"")));
            }
            if let Some(s) = cli.seed {
                extra.push(("data.seed".to_string(), s.to_string()));
            }
            let cfg = run_config(&cli, &extra)?;
            let manifest = generate_dataset(&cfg.data, out, *force)?;
            echo_config(out, &cfg, cli.deterministic)?;
            println!("{}", manifest.summary());
        }
        Command::Train { data, out, force } => {
            let extra: Vec<_> = cli.seed.map(|s| ("train.seed".to_string(), s.to_string())).into_iter().collect();
            let cfg = run_config(&cli, &extra)?;
            let ds = open_dataset(data)?;
            let ckpt = out.join("checkpoint.bin");
            let mut trainer = match Trainer::load(&ckpt) {
                Ok(t) if t.cfg == cfg.train && !force => {
                    eprintln!("resuming from epoch {} of {}", t.epoch, t.cfg.epochs);
                    t
                }
                Ok(_) if !force => bail!("{} holds a run with a different configuration; pass --force to start over", out.display()),
                Err(e) if ckpt.exists() && !force => bail!("{e}; pass --force to start over"),
                _ => {
                    let log = out.join("loss.csv");
                    if log.exists() {
                        fs::remove_file(&log)?;
                    }
                    Trainer::new(cfg.train.clone())?
                }
            };
            echo_config(out, &cfg, cli.deterministic)?;
            let path = trainer.run(&ds, out, |e, l| eprintln!("epoch {e}/{} mean loss {l:.5}", cfg.train.epochs))?;
            println!("checkpoint {}", path.display());
        }
        Command::Render { checkpoint, data, identity, frame, camera, views, out, turntable: orbit } => {
            let cfg = run_config(&cli, &[])?;
            let model = load_model(checkpoint)?;
            let ds = open_dataset(data)?;
            let cam = ds.cameras.get(*camera).with_context(|| format!("camera {camera} does not exist"))?.clone();
            let scene = scene_for(&model, &ds, identity, *frame, views, None)?;
            let frozen = model.frozen_features(&scene);
            let r = model.render_image_with(&scene, &frozen, &cam, cfg.eval.samples_per_ray, cfg.eval.chunk_rays);
            save_rendered(&r, &scene, out, "render")?;
            if let Some(n) = orbit {
                let center = scene.bbox.center();
                let eye = cam.center();
                let radius = ((eye.x - center.x).powi(2) + (eye.z - center.z).powi(2)).sqrt();
                for (i, c) in turntable(&cam, &center, radius, eye.y - center.y, *n).iter().enumerate() {
                    model.render_image_with(&scene, &frozen, c, cfg.eval.samples_per_ray, cfg.eval.chunk_rays).image.save_png(&out.join(format!("turntable_{i:03}.png")))?;
                }
            }
            echo_config(out, &cfg, cli.deterministic)?;
            println!("wrote {}", out.join("render.png").display());
        }
        Command::Animate { checkpoint, data, identity, ref_frame, pose_file, camera, views, out } => {
            let cfg = run_config(&cli, &[])?;
            let model = load_model(checkpoint)?;
            let ds = open_dataset(data)?;
            let cam = ds.cameras.get(*camera).with_context(|| format!("camera {camera} does not exist"))?.clone();
            let text = fs::read_to_string(pose_file).with_context(|| format!("reading {}", pose_file.display()))?;
            let (pose, _) = parse_body(&text).map_err(|m| anyhow::anyhow!("{}: {m}", pose_file.display()))?;
            let scene = scene_for(&model, &ds, identity, *ref_frame, views, Some(&pose))?;
            let r = model.render_image(&scene, &cam, cfg.eval.samples_per_ray, cfg.eval.chunk_rays);
            save_rendered(&r, &scene, out, "animate")?;
            echo_config(out, &cfg, cli.deterministic)?;
            println!("wrote {}", out.join("animate.png").display());
        }
        Command::Evaluate { checkpoint, data, protocol, out, views, images } => {
            let extra: Vec<_> = views.map(|v| ("eval.views".to_string(), v.to_string())).into_iter().collect();
            let cfg = run_config(&cli, &extra)?;
            let trainer = Trainer::load(checkpoint).with_context(|| format!("loading checkpoint {} (this build reads format version {CHECKPOINT_VERSION})", checkpoint.display()))?;
            let ds = open_dataset(data)?;
            let dir = report_dir(out, *protocol);
            let img_dir = images.then(|| dir.join("images"));
            let hash = RunConfig { train: trainer.cfg.clone(), ..cfg.clone() }.hash_hex();
            let rep = run_protocol(&trainer.model, &ds, *protocol, &cfg.eval, &checkpoint.display().to_string(), &hash, img_dir.as_deref())?;
            rep.write(&dir)?;
            echo_config(&dir, &cfg, cli.deterministic)?;
            print!("{}", rep.to_text());
        }
        Command::Ablate { data, out, protocol } => {
            let mut extra: Vec<_> = cli.seed.map(|s| ("train.seed".to_string(), s.to_string())).into_iter().collect();
            if let Some(p) = protocol {
                extra.push(("ablation.protocol".to_string(), format!("\"{p}\"")));
            }
            let cfg = run_config(&cli, &extra)?;
            let ds = open_dataset(data)?;
            echo_config(out, &cfg, cli.deterministic)?;
            let table = ablate(&ds, &cfg.train, &cfg.ablation, &cfg.eval, out, |m| eprintln!("{m}"))?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use avatar_core::data::Profile;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_protocols_and_ablation_flags() {
        let help = Cli::command().render_long_help().to_string();
        for p in Protocol::ALL {
            assert!(help.contains(p.name()), "{p}");
        }
        for flag in ["disable_body_nerf", "disable_ibr", "simple_avg", "cosine_weighted"] {
            assert!(help.contains(flag), "{flag}");
        }
    }

    #[test]
    fn profile_names_parse() {
        let cfg = load(None, &[], &[("data.profile".into(), "\"shifted\"".into())]).unwrap();
        assert_eq!(cfg.data.profile, Profile::Shifted);
    }
}
