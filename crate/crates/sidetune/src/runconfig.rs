//! Run configuration: a flat key-value TOML file with explicit list syntax
//! for the alpha coefficients, resolved into a complete manifest so a run
//! can be reproduced from its emitted artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CorpusLayout;
use crate::error::{Error, Result};
use crate::fusion::AlphaConfig;
use crate::model::ModelSpec;
use crate::text::TextEncoderConfig;
use crate::train::{SchedulePolicy, TrainConfig};
use crate::vision::{BackboneKind, VisionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OovPolicyConfig {
    #[default]
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "strict")]
    Strict,
}

impl From<OovPolicyConfig> for crate::text::OovPolicy {
    fn from(p: OovPolicyConfig) -> Self {
        match p {
            OovPolicyConfig::Zero => crate::text::OovPolicy::Zero,
            OovPolicyConfig::Strict => crate::text::OovPolicy::Strict,
        }
    }
}

fn default_width() -> f64 {
    1.0
}
fn default_side() -> usize {
    crate::vision::INPUT_SIDE
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr() -> f64 {
    0.1
}
fn default_windows() -> Vec<usize> {
    vec![3, 4, 5]
}
fn default_filters() -> usize {
    512
}
fn default_dropout() -> f64 {
    0.5
}
fn default_emb_dim() -> usize {
    crate::text::EMBEDDING_DIM
}
fn default_max_tokens() -> usize {
    crate::text::MAX_TOKENS
}
fn default_engine() -> PathBuf {
    PathBuf::from("tesseract")
}
fn default_lang() -> String {
    "eng".into()
}
fn default_threads() -> usize {
    4
}

/// One experiment, fully described. Unknown keys are rejected so typos fail
/// loudly; optional keys have documented defaults that the emitted manifest
/// records explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Informational dataset tag (e.g. "tobacco3482").
    pub dataset: String,
    pub image_root: PathBuf,
    pub text_root: PathBuf,
    pub layout: CorpusLayout,
    pub backbone: BackboneKind,
    #[serde(default = "default_width")]
    pub width_mult: f64,
    #[serde(default = "default_side")]
    pub input_side: usize,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub fc_width: Option<usize>,
    pub embedding_file: PathBuf,
    /// Converted backbone weights (named-tensor file) applied to base and
    /// side before training; omit for seeded random initialization.
    #[serde(default)]
    pub backbone_weights: Option<PathBuf>,
    /// Random-split cardinalities (train, val, test); omit to use the
    /// dataset's own index-file splits.
    #[serde(default)]
    pub split_sizes: Option<[usize; 3]>,
    /// Per-class proportional split instead of the plain random protocol.
    #[serde(default)]
    pub split_stratified: bool,
    pub max_epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub schedule: SchedulePolicy,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Standardization statistics; omitted values are computed from the
    /// training split and recorded in the manifest.
    #[serde(default)]
    pub channel_mean: Option<[f64; 3]>,
    #[serde(default)]
    pub channel_std: Option<[f64; 3]>,
    #[serde(default = "default_windows")]
    pub text_windows: Vec<usize>,
    #[serde(default = "default_filters")]
    pub text_filters: usize,
    #[serde(default = "default_dropout")]
    pub text_dropout: f64,
    #[serde(default = "default_emb_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub oov_policy: OovPolicyConfig,
    #[serde(default = "default_engine")]
    pub ocr_engine: PathBuf,
    #[serde(default = "default_lang")]
    pub ocr_lang: String,
    #[serde(default = "default_threads")]
    pub ocr_threads: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&body).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Checks internal consistency and that referenced inputs exist.
    pub fn validate(&self) -> Result<()> {
        AlphaConfig::new(self.alphas.clone())?;
        if let Some(w) = self.fc_width {
            if !crate::fusion::ALLOWED_FC_WIDTHS.contains(&w) {
                return Err(Error::InvalidWidth(w));
            }
        }
        self.text_config(0).validate()?;
        self.train_config().validate()?;
        if !self.width_mult.is_finite() || self.width_mult <= 0.0 {
            return Err(Error::InvalidConfig("width_mult must be positive".into()));
        }
        if !self.image_root.is_dir() {
            return Err(Error::MissingRoot(self.image_root.clone()));
        }
        if !self.text_root.is_dir() {
            return Err(Error::MissingRoot(self.text_root.clone()));
        }
        if !self.embedding_file.is_file() {
            return Err(Error::MissingRoot(self.embedding_file.clone()));
        }
        if let Some(weights) = &self.backbone_weights {
            if !weights.is_file() {
                return Err(Error::MissingRoot(weights.clone()));
            }
        }
        Ok(())
    }

    pub fn text_config(&self, num_classes: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            window_sizes: self.text_windows.clone(),
            filters_per_window: self.text_filters,
            dropout_prob: self.text_dropout,
            embedding_dim: self.embedding_dim,
            max_tokens: self.max_tokens,
            num_classes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            base_lr: self.base_lr,
            seed: self.seed,
            checkpoint_dir: Some(self.out_dir.join("checkpoints")),
            schedule: self.schedule,
        }
    }

    /// Vision configuration once statistics are known.
    pub fn vision_config(&self, mean: [f64; 3], std: [f64; 3]) -> Result<VisionConfig> {
        VisionConfig::new(self.backbone, self.input_side, mean, std, self.width_mult)
    }

    pub fn model_spec(&self, num_classes: usize, vision: VisionConfig) -> ModelSpec {
        ModelSpec {
            vision,
            text: self.text_config(num_classes),
            alphas: self.alphas.clone(),
            fc_width: self.fc_width,
            num_classes,
            init_seed: self.seed,
        }
    }

    /// A config with every field resolved (statistics included), ready to
    /// be written as the run manifest.
    pub fn resolved(&self, mean: [f64; 3], std: [f64; 3]) -> RunConfig {
        let mut out = self.clone();
        out.channel_mean = Some(mean);
        out.channel_std = Some(std);
        out
    }

    /// Canonical manifest serialization. Field order is the struct order,
    /// so equal configs hash equally.
    pub fn manifest_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.manifest_toml().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
