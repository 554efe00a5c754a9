//! Run configuration: defaults, overlaid by a TOML file, then by environment
//! variables, then by command-line `key.path=value` overrides. Unknown keys
//! are rejected at every layer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::ablation::AblationConfig;
use crate::data::DatasetConfig;
use crate::eval::EvalConfig;
use crate::train::TrainConfig;

/// Prefix of environment overrides; `__` separates path segments, so
/// `AVATAR_TRAIN__MODEL__FEATURE_DIM=8` sets `train.model.feature_dim`.
pub const ENV_PREFIX: &str = "AVATAR_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config file {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` must have the form key.path=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Stable within one build; used to key output directories and caches.
    pub fn hash_hex(&self) -> String {
        let mut h = DefaultHasher::new();
        self.to_toml().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

/// Recursively overlays `src` onto `dst`, refusing keys `dst` lacks.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(path.clone()))?;
        match (slot, v) {
            (Value::Table(d), Value::Table(s)) => merge(d, s, &path)?,
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, path: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(path.to_string()));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(ConfigError::UnknownKey(path.to_string())),
        };
    }
    let last = parts[parts.len() - 1];
    let slot = cur.get_mut(last).ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
    if matches!(slot, Value::Table(_)) {
        return Err(ConfigError::BadOverride(format!("{path} is a section, not a value")));
    }
    *slot = parse_value(raw);
    Ok(())
}

/// Splits `key.path=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    if k.trim().is_empty() {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Environment overrides as `(dotted.path, value)` pairs.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase().replace("__", "."), v)))
        .collect();
    out.sort();
    out
}

/// Builds the effective configuration.
pub fn load(file: Option<&Path>, env: &[(String, String)], overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut root = Table::try_from(RunConfig::default()).expect("defaults serialize to a table");
    if let Some(path) = file {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
        let t: Table = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: p, message: e.to_string() })?;
        merge(&mut root, t, "")?;
    }
    for (k, v) in env.iter().chain(overrides) {
        set_path(&mut root, k, v)?;
    }
    let cfg: RunConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
    cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::BlendMode;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip() {
        let c = load(None, &[], &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn precedence_file_env_cli() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nepochs = 7\nseed = 3\n[train.model]\nblend_mode = \"simple_avg\"\n").unwrap();
        let env = env_overrides([("AVATAR_TRAIN__SEED".to_string(), "4".to_string()), ("HOME".to_string(), "/x".to_string())]);
        assert_eq!(env, ov(&[("train.seed", "4")]));
        let c = load(Some(&p), &env, &ov(&[("train.seed", "5"), ("data.rig.width", "64")])).unwrap();
        assert_eq!((c.train.epochs, c.train.seed, c.data.rig.width), (7, 5, 64));
        assert_eq!(c.train.model.blend_mode, BlendMode::SimpleAvg);
        let c = load(Some(&p), &env, &[]).unwrap();
        assert_eq!(c.train.seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load(None, &[], &ov(&[("train.epoch", "3")])), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(load(None, &ov(&[("bogus.key", "1")]), &[]), Err(ConfigError::UnknownKey(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nlearning_rat = 0.1\n").unwrap();
        assert!(matches!(load(Some(&p), &[], &[]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(parse_override("novalue"), Err(ConfigError::BadOverride(_))));
    }

    #[test]
    fn type_errors_and_invalid_values() {
        assert!(matches!(load(None, &[], &ov(&[("train.epochs", "many")])), Err(ConfigError::Invalid(_))));
        assert!(matches!(load(None, &[], &ov(&[("train.model.blend_mode", "median")])), Err(ConfigError::Invalid(_))));
        assert!(matches!(load(None, &[], &ov(&[("train.learning_rate", "0.0")])), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.train.seed = 9;
        assert_ne!(a.hash_hex(), b.hash_hex());
    }
}
