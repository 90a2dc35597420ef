//! Experiment configuration: one TOML file plus `CHRONO_<SECTION>_<KEY>`
//! environment overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthscene::DataConfig;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "CHRONO_";
const SECTIONS: [&str; 5] = ["data", "model", "train", "eval", "paths"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Nominal levels of the calibration curve.
    pub levels: Vec<f64>,
    /// Level of the NDVI interval bands.
    pub ndvi_level: f64,
    pub step_days: i64,
    pub period_days: i64,
    /// Minimum distance to the nearest clean optical input for the far-gap subset.
    pub far_gap_days: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            levels: (1..10).map(|i| i as f64 / 10.0).collect(),
            ndvi_level: 0.9,
            step_days: 5,
            period_days: 365,
            far_gap_days: 25,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidConfig("eval levels must lie in (0, 1)".into()));
        }
        if !(self.ndvi_level > 0.0 && self.ndvi_level < 1.0) {
            return Err(Error::InvalidLevel(self.ndvi_level));
        }
        if self.step_days < 1 {
            return Err(Error::InvalidStep);
        }
        if self.period_days < 1 {
            return Err(Error::InvalidConfig("period_days must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; drives dataset generation and, unless the train section
    /// sets its own, model initialisation and batching.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn toml_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Toml {
        path: path.to_path_buf(),
        message: e.to_string().trim().replace('\n', " "),
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, name: &str, raw: &str) -> Result<bool> {
    let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
        return Ok(false);
    };
    let rest = rest.to_ascii_lowercase();
    if rest == "seed" {
        root.insert("seed".into(), parse_value(raw));
        return Ok(true);
    }
    let Some((section, key)) = rest.split_once('_') else {
        return Err(Error::InvalidConfig(format!("override {name} names no key")));
    };
    if !SECTIONS.contains(&section) {
        return Err(Error::InvalidConfig(format!("override {name} names unknown section {section}")));
    }
    let table = root
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("{section} is not a table")))?;
    table.insert(key.to_string(), parse_value(raw));
    Ok(true)
}

impl ExperimentConfig {
    /// Loads `path` (defaults when `None`) and applies overrides from `env`.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load<I>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let origin = path.unwrap_or(Path::new("<defaults>"));
        let mut root: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| toml_err(p, e))?
            }
            None => toml::Table::new(),
        };
        let mut vars: Vec<(String, String)> = env.into_iter().collect();
        vars.sort();
        for (k, v) in &vars {
            apply_override(&mut root, k, v)?;
        }
        let explicit_train_seed = root
            .get("train")
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key("seed"));
        let mut cfg: ExperimentConfig = toml::Value::Table(root).try_into().map_err(|e| toml_err(origin, e))?;
        if !explicit_train_seed {
            cfg.train.seed = cfg.seed;
        }
        if let Some(dir) = path.and_then(Path::parent) {
            for p in [&mut cfg.paths.data_dir, &mut cfg.paths.run_dir] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads with overrides from the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))
    }

    /// Sets the master seed and everything derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::load(None, Vec::new()).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_and_environment_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "seed = 4\n[data]\nn_samples = 10\npatch_size = 16\n[train]\nepochs = 2\n").unwrap();
        let cfg = ExperimentConfig::load(
            Some(&p),
            env(&[
                ("CHRONO_TRAIN_LEARNING_RATE", "0.01"),
                ("CHRONO_MODEL_SPP_SCALES", "[1, 2]"),
                ("CHRONO_PATHS_RUN_DIR", "/tmp/r"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.data.n_samples, 10);
        assert_eq!(cfg.data.scene.patch_size, 16);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.model.spp_scales, vec![1, 2]);
        assert_eq!(cfg.paths.run_dir, PathBuf::from("/tmp/r"));
        assert_eq!(cfg.paths.data_dir, dir.path().join("data"));

        let cfg = ExperimentConfig::load(Some(&p), env(&[("CHRONO_SEED", "9"), ("CHRONO_TRAIN_SEED", "1")])).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (9, 1));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ExperimentConfig::load(None, env(&[("CHRONO_BOGUS_X", "1")])),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            ExperimentConfig::load(None, env(&[("CHRONO_TRAIN_NO_SUCH_KEY", "1")])),
            Err(Error::Toml { .. })
        ));
        assert!(matches!(
            ExperimentConfig::load(None, env(&[("CHRONO_EVAL_STEP_DAYS", "0")])),
            Err(Error::InvalidStep)
        ));
        assert!(matches!(
            ExperimentConfig::load(Some(Path::new("/nonexistent/c.toml")), Vec::new()),
            Err(Error::NotFound(_))
        ));
    }
}
