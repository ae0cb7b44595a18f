//! Pipeline configuration shared by every stage.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dogma_core::anchor::{AnchorSet, DecodeConfig};
use dogma_core::autolabel::AutolabelConfig;
use dogma_core::filter::FilterConfig;
use dogma_core::loss::LossConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    /// Encode every n-th label frame; tensors are large.
    pub frame_stride: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self { frame_stride: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCheckConfig {
    /// Std. dev. of the noise added to labels to form predictions.
    pub prediction_noise: f64,
    /// Side of the patch used for the finite-difference check, cells.
    pub patch_cells: usize,
    pub gradient_samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for LossCheckConfig {
    fn default() -> Self {
        Self {
            prediction_noise: 0.05,
            patch_cells: 12,
            gradient_samples: 200,
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU a detection needs to count as matched in the RMSE.
    pub rmse_iou: f64,
    /// IoU thresholds of the precision-recall sweep.
    pub iou_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rmse_iou: 0.5,
            iou_sweep: dogma_core::eval::default_iou_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scenario file, relative to the config file.
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub grid_size: Option<usize>,
    pub filter: FilterConfig,
    pub autolabel: AutolabelConfig,
    pub anchors: AnchorSet,
    pub encode: EncodeConfig,
    pub loss: LossConfig,
    pub loss_check: LossCheckConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: PathBuf::from("scenario.toml"),
            seed: None,
            grid_size: None,
            filter: FilterConfig::default(),
            autolabel: AutolabelConfig::default(),
            anchors: AnchorSet::default(),
            encode: EncodeConfig::default(),
            loss: LossConfig::default(),
            loss_check: LossCheckConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Loads a config file and resolves the scenario path against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if cfg.scenario.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.scenario = base.join(&cfg.scenario);
        }
        Ok(cfg)
    }

    /// Applies command-line overrides; a seed reseeds both the simulator and
    /// the filter.
    pub fn with_overrides(mut self, seed: Option<u64>, grid_size: Option<usize>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if grid_size.is_some() {
            self.grid_size = grid_size;
        }
        if let Some(s) = self.seed {
            self.filter.rng_seed = s;
        }
        self
    }
}
