//! JSON run configuration. Every field has a default, so `{}` plus a
//! `schema_version` is a complete config; the resolved form (all defaults
//! filled in) is what lands in each manifest.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{self, GroupSpec};
use crate::trainer::{EvalOptions, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_GAMMAS: [f64; 3] = [1e-3, 1e-2, 1e-1];

pub const DEFAULT_HOLDOUT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub raw_dim: usize,
    pub groups: Vec<GroupSpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            raw_dim: synthdata::DEFAULT_RAW_DIM,
            groups: synthdata::default_group_specs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    /// Identities per group withheld from training for evaluation; 0 trains
    /// and evaluates on everything.
    pub holdout_identities_per_group: usize,
    pub eval: EvalOptions,
    /// Overall FPR levels reported by `evaluate` and `sweep`.
    pub gammas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            holdout_identities_per_group: DEFAULT_HOLDOUT,
            eval: EvalOptions::default(),
            gammas: DEFAULT_GAMMAS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::InvalidArgument(format!("gammas must lie in (0, 1), got {:?}", self.gammas)));
        }
        if self.eval.roc_points < 2 {
            return Err(Error::InvalidArgument("eval.roc_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Parses a config file, or returns the defaults when `path` is `None`.
pub fn load<T: DeserializeOwned + Default + HasSchema>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

pub fn parse<T: DeserializeOwned + HasSchema>(text: &str, path: &Path) -> Result<T> {
    let cfg: T = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        field: "config".into(),
        message: e.to_string(),
    })?;
    if cfg.schema_version() != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            field: "schema_version".into(),
            message: format!("unsupported schema version {} (expected {SCHEMA_VERSION})", cfg.schema_version()),
        });
    }
    Ok(cfg)
}

pub trait HasSchema {
    fn schema_version(&self) -> u32;
}

impl HasSchema for GenerateConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl HasSchema for RunConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = parse(r#"{"schema_version": 1, "train": {"epochs": 3, "loss": {"alpha": 0.5}}}"#, Path::new("x")).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.alpha, 0.5);
        assert_eq!(cfg.train.loss.s, 64.0);
        assert_eq!(cfg.holdout_identities_per_group, DEFAULT_HOLDOUT);
    }

    #[test]
    fn bad_json_reports_line() {
        let err = parse::<RunConfig>("{\n  \"schema_version\": 1,\n  \"train\": {,}\n}", Path::new("cfg.json")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_field_and_version_rejected() {
        assert!(parse::<RunConfig>(r#"{"schema_version": 1, "trian": {}}"#, Path::new("x")).is_err());
        assert!(parse::<RunConfig>(r#"{"schema_version": 9}"#, Path::new("x")).is_err());
    }
}
