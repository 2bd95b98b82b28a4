//! Run configuration files.
//!
//! A run configuration is a TOML document. Unknown keys are rejected.
//!
//! ```toml
//! preset = "pds-base-16"         # or an explicit `[[stages]]` list
//! block_type = "transformer"     # transformer | conformer
//! fusion = true                  # defaults to the preset's setting
//! dims = "width-growth"          # same | width-growth | depth-growth
//! stage_dims = [192, 224, 256, 320]
//! hidden_dim = 256
//! heads = 4
//! seed = 0
//! batch_size = 8
//! mode = "eval"                  # eval | train
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::config::{
    DEFAULT_DROPOUT, DEFAULT_FFN_DIM, DEFAULT_HEADS, DEFAULT_MODEL_DIM, FEATURE_DIM,
};
use crate::encoder::{growth_layout, BlockType, DimsMode, EncoderConfig, Preset, StageSpec};
use crate::error::{PdsError, Result};
use crate::model::ModelConfig;

/// Feed-forward width as a multiple of the hidden width in the growth settings.
pub const GROWTH_FFN_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Eval,
    Train,
}

impl FromStr for RunMode {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval" => Ok(Self::Eval),
            "train" => Ok(Self::Train),
            other => Err(PdsError::config(format!(
                "unknown mode {other:?} (expected eval or train)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageSpec>>,
    #[serde(default = "default_block")]
    pub block_type: BlockType,
    /// Defaults to the preset's setting, or on for explicit stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<bool>,
    #[serde(default = "default_dims")]
    pub dims: DimsMode,
    /// Per-stage widths for the growth modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_dims: Option<Vec<usize>>,
    /// Per-stage layer counts overriding the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_layers: Option<Vec<usize>>,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Uniform feed-forward width; the growth modes default to 4x each stage width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mode: RunMode,
}

fn default_block() -> BlockType {
    BlockType::Transformer
}
fn default_dims() -> DimsMode {
    DimsMode::Same
}
fn default_hidden() -> usize {
    DEFAULT_MODEL_DIM
}
fn default_heads() -> usize {
    DEFAULT_HEADS
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_batch() -> usize {
    8
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::PdsBase16)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset),
            stages: None,
            block_type: default_block(),
            fusion: None,
            dims: default_dims(),
            stage_dims: None,
            stage_layers: None,
            hidden_dim: default_hidden(),
            heads: default_heads(),
            ffn_dim: None,
            dropout: default_dropout(),
            seed: 0,
            batch_size: default_batch(),
            mode: RunMode::Eval,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| PdsError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| PdsError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PdsError::config(e.to_string()))
    }

    /// Replaces any stage description with a named preset.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.preset = Some(preset);
        self.stages = None;
        self
    }

    /// Human-readable name: the preset name or `custom`.
    pub fn name(&self) -> String {
        match self.preset {
            Some(p) if self.stages.is_none() => p.name().to_string(),
            _ => "custom".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PdsError::config("batch_size must be positive"));
        }
        self.encoder_config().map(|_| ())
    }

    pub fn fusion_enabled(&self) -> bool {
        self.fusion
            .unwrap_or(self.preset.is_none_or(Preset::default_fusion))
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut cfg = match (&self.stages, self.preset) {
            (Some(_), Some(_)) => {
                return Err(PdsError::config("give either preset or stages, not both"))
            }
            (Some(stages), None) => EncoderConfig {
                stages: stages.clone(),
                block_type: self.block_type,
                heads: self.heads,
                ffn_dim: DEFAULT_FFN_DIM,
                dropout: self.dropout,
                input_dim: FEATURE_DIM,
            },
            (None, Some(p)) => EncoderConfig::preset(p, self.hidden_dim),
            (None, None) => return Err(PdsError::config("either preset or stages is required")),
        };
        cfg.block_type = self.block_type;
        cfg.heads = self.heads;
        cfg.dropout = self.dropout;
        if let Some(f) = self.ffn_dim {
            cfg.ffn_dim = f;
        }

        let published = self.preset.and_then(|p| growth_layout(p, self.dims));
        if let Some(layers) = self.stage_layers.as_deref().or(published.map(|l| l.0)) {
            cfg = cfg.with_layer_counts(layers)?;
        }
        match self.dims {
            DimsMode::Same => {
                if self.stage_dims.is_some() {
                    return Err(PdsError::config(
                        "stage_dims requires dims = width-growth or depth-growth",
                    ));
                }
            }
            DimsMode::WidthGrowth | DimsMode::DepthGrowth => {
                let dims = match (self.stage_dims.as_deref(), published) {
                    (Some(d), _) => d,
                    (None, Some((_, d))) => d,
                    (None, None) => {
                        return Err(PdsError::config(
                            "growth modes need stage_dims with one width per stage",
                        ))
                    }
                };
                if dims.windows(2).any(|w| w[1] < w[0]) {
                    return Err(PdsError::config(format!(
                        "stage_dims {dims:?} must not decrease"
                    )));
                }
                cfg = cfg.with_stage_dims(dims)?;
                if self.ffn_dim.is_none() {
                    cfg = cfg.with_ffn_ratio(GROWTH_FFN_RATIO);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder plus fusion as configured, without a decoder.
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: self.encoder_config()?,
            fusion: self.fusion_enabled(),
            decoder: None,
        })
    }
}
