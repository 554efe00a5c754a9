//! Component ablations and the source-view-count sweep, trained and
//! evaluated under one schedule and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blend::BlendMode;
use crate::data::Dataset;
use crate::eval::{run_protocol, EvalConfig, EvalError, Protocol};
use crate::train::{train_cached, TrainConfig, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Epochs per variant (the schedule otherwise follows `train`).
    pub epochs: usize,
    pub protocol: Protocol,
    pub view_counts: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { epochs: 10, protocol: Protocol::NovelViewUnseenId, view_counts: vec![1, 2, 3] }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {0}: {1}")]
    Io(String, std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub description: String,
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub protocol: Protocol,
    pub components: Vec<AblationRow>,
    pub views: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.components.iter().chain(&self.views).find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("protocol {}\n\n{:<8} {:<34} {:>8} {:>8}\n", self.protocol, "row", "variant", "PSNR", "SSIM");
        for r in &self.components {
            let _ = writeln!(s, "{:<8} {:<34} {:>8.3} {:>8.4}", r.label, r.description, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "\n{:<8} {:<34} {:>8} {:>8}", "views", "", "PSNR", "SSIM");
        for r in &self.views {
            let _ = writeln!(s, "{:<8} {:<34} {:>8.3} {:>8.4}", r.label, r.description, r.psnr, r.ssim);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,label,description,views,psnr,ssim\n");
        for (g, rows) in [("component", &self.components), ("views", &self.views)] {
            for r in rows {
                let _ = writeln!(s, "{g},{},{},{},{:.6},{:.6}", r.label, r.description, r.views, r.psnr, r.ssim);
            }
        }
        s
    }
}

/// Rows (a)-(e): label, description and the configuration of each variant.
pub fn component_variants(base: &TrainConfig) -> Vec<(&'static str, &'static str, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.model.disable_ibr = false;
        c.model.disable_body_nerf = false;
        c.model.blend_mode = BlendMode::Learned;
        f(&mut c);
        c
    };
    vec![
        ("a", "without implicit body field", with(&|c| c.model.disable_body_nerf = true)),
        ("b", "without image-based rendering", with(&|c| c.model.disable_ibr = true)),
        ("c", "simple averaging", with(&|c| c.model.blend_mode = BlendMode::SimpleAvg)),
        ("d", "cosine-weighted averaging", with(&|c| c.model.blend_mode = BlendMode::CosineWeighted)),
        ("e", "full model", with(&|_| {})),
    ]
}

/// Trains (or resumes) and evaluates every variant under `out`, one
/// subdirectory per variant, and writes `ablation.txt` / `ablation.csv`.
pub fn ablate(
    ds: &Dataset,
    base: &TrainConfig,
    ab: &AblationConfig,
    eval: &EvalConfig,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<AblationTable, AblationError> {
    let mut base = base.clone();
    base.epochs = ab.epochs;
    let evaluate = |label: &str, cfg: &TrainConfig, views: usize, log: &mut dyn FnMut(&str)| -> Result<(f64, f64), AblationError> {
        let dir = out.join(label);
        let t = train_cached(cfg, ds, &dir, |e, l| log(&format!("[{label}] epoch {e}/{} loss {l:.4}", cfg.epochs)))?;
        let ecfg = EvalConfig { views, ..eval.clone() };
        let rep = run_protocol(&t.model, ds, ab.protocol, &ecfg, &dir.join("checkpoint.bin").display().to_string(), "", None)?;
        rep.write(&dir.join("eval")).map_err(AblationError::Eval)?;
        log(&format!("[{label}] {} PSNR {:.3} SSIM {:.4}", ab.protocol, rep.mean_psnr, rep.mean_ssim));
        Ok((rep.mean_psnr, rep.mean_ssim))
    };
    let mut components = Vec::new();
    let full_views = base.views;
    for (label, desc, cfg) in component_variants(&base) {
        let (psnr, ssim) = evaluate(label, &cfg, full_views, &mut log)?;
        components.push(AblationRow { label: label.into(), description: desc.into(), views: full_views, psnr, ssim });
    }
    let full = components.last().cloned().expect("full model row");
    let mut views = Vec::new();
    for &n in &ab.view_counts {
        let row = if n == full_views {
            AblationRow { label: format!("{n}"), description: format!("{n} input views"), ..full.clone() }
        } else {
            let cfg = TrainConfig { views: n, ..component_variants(&base).pop().expect("full variant").2 };
            let (psnr, ssim) = evaluate(&format!("views{n}"), &cfg, n, &mut log)?;
            AblationRow { label: format!("{n}"), description: format!("{n} input views"), views: n, psnr, ssim }
        };
        views.push(row);
    }
    let table = AblationTable { protocol: ab.protocol, components, views };
    fs::create_dir_all(out).map_err(|e| AblationError::Io(out.display().to_string(), e))?;
    for (name, body) in [("ablation.txt", table.to_text()), ("ablation.csv", table.to_csv())] {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| AblationError::Io(p.display().to_string(), e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_follow_the_table_rows() {
        let base = TrainConfig::default();
        let v = component_variants(&base);
        assert_eq!(v.iter().map(|r| r.0).collect::<Vec<_>>(), ["a", "b", "c", "d", "e"]);
        assert!(v[0].2.model.disable_body_nerf && !v[0].2.model.disable_ibr);
        assert!(v[1].2.model.disable_ibr);
        assert_eq!(v[2].2.model.blend_mode, BlendMode::SimpleAvg);
        assert_eq!(v[3].2.model.blend_mode, BlendMode::CosineWeighted);
        assert_eq!(v[4].2, base);
        assert!(v.iter().all(|r| r.2.seed == base.seed && r.2.epochs == base.epochs));
    }
}
