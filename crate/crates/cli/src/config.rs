//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use mixedtrees::evaluation::ModelSpec;
use mixedtrees::merf::MerfGrid;
use mixedtrees::FoldMode;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    /// Model for `fit`.
    pub model: Option<ModelSpec>,
    /// Models for `cv`.
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    /// Optional MERF grid search run by `fit` before the final fit.
    pub grid: Option<GridConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub subject: Option<String>,
    pub wave: Option<String>,
    /// Defaults to the first column that is neither subject nor wave.
    pub response: Option<String>,
    pub predictors: Option<Vec<String>>,
    pub delimiter: Option<char>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
    pub mode: FoldMode,
    pub baseline: String,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 10, mode: FoldMode::SubjectGrouped, baseline: "lmm".into() }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub preset: Option<String>,
    /// JSON simulation spec.
    pub spec: Option<PathBuf>,
    /// Overrides the number of subjects.
    pub subjects: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub n_iter: Vec<usize>,
    #[serde(default = "default_grid_k")]
    pub k: usize,
}

impl GridConfig {
    pub fn grid(&self) -> MerfGrid {
        MerfGrid { n_trees: self.n_trees.clone(), max_depth: self.max_depth.clone(), n_iter: self.n_iter.clone() }
    }
}

fn default_grid_k() -> usize {
    5
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = toml::from_str(&text)
            .map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?;
        Ok((cfg, text))
    }
}
