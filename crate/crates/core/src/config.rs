//! The pipeline configuration file: one TOML document with a section per
//! stage. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleaning::CleaningConfig;
use crate::features::FeatureConfig;
use crate::patchgen::PatchConfig;
use crate::sampler::SolverMode;
use crate::screening::ScreeningConfig;
use crate::simulate::SimSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of videos to select; 0 means it must come from the command line.
    pub target_size: usize,
    pub bins_per_feature: usize,
    pub mode: SolverMode,
    pub swap_cap_factor: usize,
    pub seed: u64,
    pub quotas: BTreeMap<String, QuotaRange>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            target_size: 0,
            bins_per_feature: 10,
            mode: SolverMode::Heuristic,
            swap_cap_factor: 50,
            seed: 0,
            quotas: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n_splits: usize,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_splits: 50,
            seed: 0,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub spec: SimSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub sampler: SamplerConfig,
    pub patches: PatchConfig,
    pub screening: ScreeningConfig,
    pub cleaning: CleaningConfig,
    pub analysis: AnalysisConfig,
    pub simulate: SimulateConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.features
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.patches
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.screening.validate().map_err(invalid)?;
        self.cleaning.validate().map_err(invalid)?;
        self.simulate
            .spec
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.sampler.bins_per_feature < 2 {
            return Err(invalid(
                "sampler.bins_per_feature must be at least 2".into(),
            ));
        }
        if let Some((g, q)) = self.sampler.quotas.iter().find(|(_, q)| q.min > q.max) {
            return Err(invalid(format!(
                "sampler.quotas.{g}: min {} exceeds max {}",
                q.min, q.max
            )));
        }
        if self.analysis.n_splits == 0 || self.analysis.histogram_bins == 0 {
            return Err(invalid(
                "analysis.n_splits and histogram_bins must be positive".into(),
            ));
        }
        Ok(())
    }
}
