//! Run configuration: one JSON document validated up front; every CLI flag
//! overrides its config key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadMode, KarseinHyper, TowerSet};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Karsein,
    Kan,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// builtin schema name: ml1m, douban, or criteo
    pub schema: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub kappa: usize,
    pub grid: usize,
    pub spline_range: f64,
    pub explicit_hidden: Vec<usize>,
    pub implicit_hidden: Vec<usize>,
    pub pairwise_layers: Vec<usize>,
    pub head_mode: HeadMode,
    pub towers: TowerSet,
    /// hidden widths of the kan / mlp baselines
    pub baseline_hidden: Vec<usize>,
    /// spline settings of the kan baseline
    pub baseline_grid: usize,
    pub baseline_kappa: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Karsein,
            embed_dim: 16,
            kappa: 3,
            grid: 10,
            spline_range: 1.0,
            explicit_hidden: vec![8, 8],
            implicit_hidden: vec![32, 32],
            pairwise_layers: vec![1, 2],
            head_mode: HeadMode::Mean,
            towers: TowerSet::Both,
            baseline_hidden: vec![64, 64],
            baseline_grid: 3,
            baseline_kappa: 1,
        }
    }
}

impl ModelConfig {
    pub fn karsein_hyper(&self) -> KarseinHyper {
        KarseinHyper {
            embed_dim: self.embed_dim,
            kappa: self.kappa,
            grid: self.grid,
            spline_range: self.spline_range,
            explicit_hidden: self.explicit_hidden.clone(),
            implicit_hidden: self.implicit_hidden.clone(),
            pairwise_layers: self.pairwise_layers.clone(),
            head_mode: self.head_mode,
            towers: self.towers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            threads: d.threads,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            seed,
            threads: self.threads,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1".to_string()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        if self.train.lambda1 < 0.0 || self.train.lambda2 < 0.0 {
            return Err(Error::config("lambda1/lambda2 must be >= 0".to_string()));
        }
        if self.model.kappa < 1 || self.model.grid < 1 {
            return Err(Error::config("kappa and grid must be >= 1".to_string()));
        }
        crate::data::DatasetSchema::by_name(&self.dataset.schema)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_follow_the_documented_grid() {
        let m = ModelConfig::default();
        assert_eq!(m.embed_dim, 16);
        assert_eq!((m.kappa, m.grid), (3, 10));
        assert_eq!(m.explicit_hidden, vec![8, 8]);
        assert_eq!(m.implicit_hidden, vec![32, 32]);
        let t = TrainSection::default();
        assert_eq!(t.lr, 1e-3);
        assert_eq!(t.batch_size, 512);
        assert_eq!((t.lambda1, t.lambda2), (1e-2, 1e-4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"{{"dataset": {{"path": "x.csv", "schema": "ml1m"}}, "bogus": 1}}"#
        )
        .unwrap();
        assert!(RunConfig::from_file(f.path()).is_err());
    }

    #[test]
    fn minimal_config_parses() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"dataset": {{"path": "x.csv", "schema": "ml1m"}}}}"#).unwrap();
        let cfg = RunConfig::from_file(f.path()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.kind, ModelKind::Karsein);
    }

    #[test]
    fn bad_schema_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"dataset": {{"path": "x.csv", "schema": "imagenet"}}}}"#).unwrap();
        assert!(RunConfig::from_file(f.path()).is_err());
    }
}
