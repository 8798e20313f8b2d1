//! The run configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::features::{AggregationSpec, SynthConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// File name of the resolved config written into every output directory.
pub const RESOLVED_CONFIG_NAME: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory holding the manifest.
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/synthetic"),
            out: PathBuf::from("runs/default"),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Neighbourhood aggregation window per scale.
    pub aggregation_windows: Vec<usize>,
    pub synth: SynthConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            aggregation_windows: vec![5, 3],
            synth: SynthConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn aggregation(&self) -> AggregationSpec {
        AggregationSpec {
            windows: self.aggregation_windows.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub feature_pipeline: FeatureConfig,
    pub reconstruction_model: ModelConfig,
    pub training: TrainConfig,
    pub scoring_eval: EvalConfig,
}

impl RunConfig {
    /// Parses a TOML document; absent keys take their defaults, unknown keys
    /// are rejected.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Uses `seed` for data synthesis, initialisation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.feature_pipeline.synth.seed = seed;
        self.reconstruction_model.seed = seed;
        self.training.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.reconstruction_model.validate().map_err(|e| invalid(&e))?;
        self.training.validate().map_err(|e| invalid(&e))?;
        self.feature_pipeline.synth.validate().map_err(|e| invalid(&e))?;
        let scales = self.reconstruction_model.scales.len();
        let windows = &self.feature_pipeline.aggregation_windows;
        if windows.len() != scales {
            return Err(ConfigError::Invalid(format!(
                "{} aggregation windows for {scales} model scales",
                windows.len()
            )));
        }
        for (j, (&p, s)) in windows.iter().zip(&self.reconstruction_model.scales).enumerate() {
            if p == 0 || p % 2 == 0 || p > s.height.min(s.width) {
                return Err(ConfigError::Invalid(format!(
                    "aggregation window {p} invalid for the {}x{} grid of scale {j}",
                    s.height, s.width
                )));
            }
        }
        if self.scoring_eval.smoothing == 0 {
            return Err(ConfigError::Invalid("scoring_eval.smoothing must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved config into `dir`, returning its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }
}
