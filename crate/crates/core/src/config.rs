//! Run configuration, read from and archived as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DefectKind, SynthDefectConfig, TextureKind};
use crate::encoder::{Backbone, EncoderConfig, RESNET_BLOCK3_WIDTH};
use crate::error::{CpcError, Result};
use crate::geometry::{plan_grid, GridSpec};
use crate::raster::Interpolation;
use crate::scoring::{NegativeScope, ScoringParams};
use crate::trainer::{check_encoder_fits, validate_offsets, TrainConfig};

/// File name of the archived config in every artifact directory.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub texture_kind: TextureKind,
    pub defect_kind: DefectKind,
    pub defect_size_range: [f64; 2],
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory holding one MVTec-style folder per class.
    pub root: PathBuf,
    pub class: String,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub offsets: Vec<usize>,
    pub negatives: usize,
    pub top_fraction: f64,
    /// Maximum number of training sub-patch embeddings kept per model.
    pub bank_size: usize,
    pub negative_sampling_scope: NegativeScope,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            offsets: vec![2, 3],
            negatives: 16,
            top_fraction: 0.05,
            bank_size: 20_000,
            negative_sampling_scope: NegativeScope::PerSite,
        }
    }
}

impl ScoringSection {
    pub fn params(&self) -> ScoringParams {
        ScoringParams {
            offsets: self.offsets.clone(),
            negatives: self.negatives,
            scope: self.negative_sampling_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default = "GridSpec::full_scale")]
    pub grid: GridSpec,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scoring: ScoringSection,
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig {
        backbone: Backbone::ResNet18V2Block3,
        embedding_dim: RESNET_BLOCK3_WIDTH,
        input_side: GridSpec::full_scale().subpatch_side,
    }
}

impl RunConfig {
    /// Parses without validating, so command-line overrides can be applied first.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CpcError::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CpcError::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks every section and their cross-field consistency, and copies the
    /// global seed into the training section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        if self.dataset.class.trim().is_empty() {
            return Err(CpcError::Config("dataset.class must not be empty".into()));
        }
        let layout = plan_grid(self.grid)?;
        self.encoder.validate()?;
        check_encoder_fits(&self.grid, &self.encoder)?;
        self.train.validate(&layout)?;
        validate_offsets(&self.scoring.offsets, &layout)?;
        let missing: Vec<usize> = self
            .scoring
            .offsets
            .iter()
            .copied()
            .filter(|k| !self.train.offsets.contains(k))
            .collect();
        if !missing.is_empty() {
            return Err(CpcError::Config(format!(
                "scoring offsets {missing:?} have no trained predictor (train.offsets = {:?})",
                self.train.offsets
            )));
        }
        let s = &self.scoring;
        if !(s.top_fraction > 0.0 && s.top_fraction <= 1.0) {
            return Err(CpcError::Config(format!("top_fraction {} must lie in (0, 1]", s.top_fraction)));
        }
        if s.negatives == 0 || s.bank_size < s.negatives {
            return Err(CpcError::Config(format!(
                "bank_size {} must be at least scoring.negatives {} (> 0)",
                s.bank_size, s.negatives
            )));
        }
        if let Some(synth) = self.synthetic() {
            synth.validate(self.grid.image_side)?;
        }
        Ok(self)
    }

    pub fn synthetic(&self) -> Option<SynthDefectConfig> {
        self.dataset.synthetic.as_ref().map(|s| SynthDefectConfig {
            texture_kind: s.texture_kind,
            defect_kind: s.defect_kind,
            defect_size_range: s.defect_size_range,
            n_train: s.n_train,
            n_test_normal: s.n_test_normal,
            n_test_anomalous: s.n_test_anomalous,
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn archive(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CpcError::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CpcError::io(&path, e))
    }
}
