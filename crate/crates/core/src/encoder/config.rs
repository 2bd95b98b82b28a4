use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PdsError, Result};

/// Kernel of every down-sampling convolution unless overridden.
pub const DEFAULT_DS_KERNEL: usize = 5;
/// Kernel of the depthwise convolution inside conformer blocks.
pub const CONFORMER_CONV_KERNEL: usize = 15;
pub const DEFAULT_MODEL_DIM: usize = 256;
pub const DEFAULT_FFN_DIM: usize = 2048;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const FEATURE_DIM: usize = 80;

/// One stage: a down-sampling module followed by `num_layers` context layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stride: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_ds_kernel")]
    pub ds_kernel: usize,
    /// Feed-forward width of this stage's layers; the encoder-wide value when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
}

fn default_ds_kernel() -> usize {
    DEFAULT_DS_KERNEL
}

impl StageSpec {
    pub fn new(stride: usize, num_layers: usize, hidden_dim: usize) -> Self {
        Self {
            stride,
            num_layers,
            hidden_dim,
            ds_kernel: DEFAULT_DS_KERNEL,
            ffn_dim: None,
        }
    }

    /// Symmetric padding of the down-sampling convolution, `(K - 1) / 2`.
    pub fn ds_padding(&self) -> usize {
        (self.ds_kernel - 1) / 2
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(PdsError::config(format!(
                "stage {index}: stride must be positive"
            )));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(2) {
            return Err(PdsError::config(format!(
                "stage {index}: hidden_dim {} must be positive and even",
                self.hidden_dim
            )));
        }
        if self.ffn_dim == Some(0) {
            return Err(PdsError::config(format!(
                "stage {index}: ffn_dim must be positive"
            )));
        }
        if self.ds_kernel == 0 || self.ds_kernel.is_multiple_of(2) {
            return Err(PdsError::config(format!(
                "stage {index}: ds_kernel {} must be odd",
                self.ds_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Transformer,
    Conformer,
}

impl BlockType {
    pub fn name(self) -> &'static str {
        match self {
            BlockType::Transformer => "transformer",
            BlockType::Conformer => "conformer",
        }
    }
}

impl FromStr for BlockType {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "conformer" => Ok(Self::Conformer),
            other => Err(PdsError::config(format!(
                "unknown block type {other:?} (expected transformer or conformer)"
            ))),
        }
    }
}

/// The encoder settings of the published comparison table, by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    Stack4,
    PdsBase8,
    PdsBase16,
    PdsBase32,
    PdsDeep8,
    PdsDeep16,
    PdsDeep32,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Stack4,
        Preset::PdsBase8,
        Preset::PdsBase16,
        Preset::PdsBase32,
        Preset::PdsDeep8,
        Preset::PdsDeep16,
        Preset::PdsDeep32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Stack4 => "stack-4",
            Preset::PdsBase8 => "pds-base-8",
            Preset::PdsBase16 => "pds-base-16",
            Preset::PdsBase32 => "pds-base-32",
            Preset::PdsDeep8 => "pds-deep-8",
            Preset::PdsDeep16 => "pds-deep-16",
            Preset::PdsDeep32 => "pds-deep-32",
        }
    }

    pub fn strides(self) -> &'static [usize] {
        match self {
            Preset::Stack4 => &[2, 2],
            Preset::PdsBase8 | Preset::PdsDeep8 => &[2, 2, 1, 2],
            Preset::PdsBase16 | Preset::PdsDeep16 => &[2, 2, 2, 2],
            Preset::PdsBase32 | Preset::PdsDeep32 => &[2, 2, 2, 2, 2],
        }
    }

    pub fn layers(self) -> &'static [usize] {
        match self {
            Preset::Stack4 => &[0, 12],
            Preset::PdsBase8 => &[3, 3, 3, 3],
            Preset::PdsBase16 => &[2, 2, 6, 2],
            Preset::PdsBase32 => &[2, 2, 3, 3, 2],
            Preset::PdsDeep8 => &[7, 7, 7, 9],
            Preset::PdsDeep16 => &[5, 5, 12, 8],
            Preset::PdsDeep32 => &[5, 5, 7, 7, 6],
        }
    }

    /// Advertised down-sampling ratio.
    pub fn ratio(self) -> usize {
        match self {
            Preset::Stack4 => 4,
            Preset::PdsBase8 | Preset::PdsDeep8 => 8,
            Preset::PdsBase16 | Preset::PdsDeep16 => 16,
            Preset::PdsBase32 | Preset::PdsDeep32 => 32,
        }
    }

    /// Whether representation fusion is part of the setting (the stacked baseline has none).
    pub fn default_fusion(self) -> bool {
        self != Preset::Stack4
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|p| p.name()).collect()
    }
}

impl FromStr for Preset {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.name() == lower)
            .ok_or_else(|| {
                PdsError::config(format!(
                    "unknown preset {s:?}; valid presets: {}",
                    Self::names().join(", ")
                ))
            })
    }
}

impl TryFrom<String> for Preset {
    type Error = PdsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.name().to_string()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-stage hidden width schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimsMode {
    Same,
    WidthGrowth,
    DepthGrowth,
}

impl FromStr for DimsMode {
    type Err = PdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Self::Same),
            "width-growth" => Ok(Self::WidthGrowth),
            "depth-growth" => Ok(Self::DepthGrowth),
            other => Err(PdsError::config(format!(
                "unknown dims mode {other:?} (expected same, width-growth or depth-growth)"
            ))),
        }
    }
}

/// Published growth layouts `(layers, widths)` for the ratio-8 and ratio-16 base settings.
pub fn growth_layout(
    preset: Preset,
    mode: DimsMode,
) -> Option<(&'static [usize], &'static [usize])> {
    match (preset, mode) {
        (Preset::PdsBase8, DimsMode::WidthGrowth) => Some((&[3, 3, 3, 3], &[192, 256, 256, 320])),
        (Preset::PdsBase8, DimsMode::DepthGrowth) => Some((&[5, 3, 3, 5], &[192, 224, 224, 256])),
        (Preset::PdsBase16, DimsMode::WidthGrowth) => Some((&[2, 2, 6, 2], &[192, 224, 256, 320])),
        (Preset::PdsBase16, DimsMode::DepthGrowth) => Some((&[3, 3, 9, 3], &[160, 192, 224, 256])),
        _ => None,
    }
}

/// Full encoder description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: Vec<StageSpec>,
    pub block_type: BlockType,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub input_dim: usize,
}

impl EncoderConfig {
    /// A named preset with uniform hidden width `dim` and the remaining settings at their defaults.
    pub fn preset(preset: Preset, dim: usize) -> Self {
        let stages = preset
            .strides()
            .iter()
            .zip(preset.layers())
            .map(|(&s, &l)| StageSpec::new(s, l, dim))
            .collect();
        Self {
            stages,
            block_type: BlockType::Transformer,
            heads: DEFAULT_HEADS,
            ffn_dim: DEFAULT_FFN_DIM,
            dropout: DEFAULT_DROPOUT,
            input_dim: FEATURE_DIM,
        }
    }

    /// Tiny variant for verification: width `dim`, FFN `2 * dim`, two heads, no dropout.
    pub fn micro(preset: Preset, dim: usize, layers_per_stage: Option<usize>) -> Self {
        let mut cfg = Self::preset(preset, dim);
        if let Some(n) = layers_per_stage {
            for s in &mut cfg.stages {
                s.num_layers = n;
            }
        }
        cfg.heads = 2;
        cfg.ffn_dim = 2 * dim;
        cfg.dropout = 0.0;
        cfg
    }

    pub fn with_block(mut self, block: BlockType) -> Self {
        self.block_type = block;
        self
    }

    /// Replaces the per-stage hidden widths (one per stage).
    pub fn with_stage_dims(mut self, dims: &[usize]) -> Result<Self> {
        if dims.len() != self.stages.len() {
            return Err(PdsError::config(format!(
                "{} stage widths given for {} stages",
                dims.len(),
                self.stages.len()
            )));
        }
        for (s, &d) in self.stages.iter_mut().zip(dims) {
            s.hidden_dim = d;
        }
        Ok(self)
    }

    /// Replaces the per-stage layer counts (one per stage).
    pub fn with_layer_counts(mut self, layers: &[usize]) -> Result<Self> {
        if layers.len() != self.stages.len() {
            return Err(PdsError::config(format!(
                "{} layer counts given for {} stages",
                layers.len(),
                self.stages.len()
            )));
        }
        for (s, &n) in self.stages.iter_mut().zip(layers) {
            s.num_layers = n;
        }
        Ok(self)
    }

    /// Sets every stage's feed-forward width to `ratio` times its hidden width.
    pub fn with_ffn_ratio(mut self, ratio: usize) -> Self {
        for s in &mut self.stages {
            s.ffn_dim = Some(ratio * s.hidden_dim);
        }
        self
    }

    pub fn stage_ffn_dim(&self, stage: usize) -> usize {
        self.stages[stage].ffn_dim.unwrap_or(self.ffn_dim)
    }

    pub fn strides(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.stride).collect()
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.num_layers).collect()
    }

    /// Product of all strides.
    pub fn ratio(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn total_layers(&self) -> usize {
        self.stages.iter().map(|s| s.num_layers).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.input_dim, |s| s.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PdsError::config("encoder needs at least one stage"));
        }
        if self.input_dim == 0 {
            return Err(PdsError::config("input_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PdsError::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
            if s.num_layers > 0 && (self.heads == 0 || s.hidden_dim % self.heads != 0) {
                return Err(PdsError::config(format!(
                    "stage {i}: hidden_dim {} not divisible by {} heads",
                    s.hidden_dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_ratios_match_strides() {
        for p in Preset::ALL {
            assert_eq!(p.strides().iter().product::<usize>(), p.ratio(), "{p}");
            assert_eq!(p.strides().len(), p.layers().len());
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = "pds-base-64".parse::<Preset>().unwrap_err().to_string();
        for name in Preset::names() {
            assert!(err.contains(name));
        }
    }

    #[test]
    fn growth_dims_must_match_stage_count() {
        let cfg = EncoderConfig::preset(Preset::PdsBase8, 256);
        assert!(cfg.clone().with_stage_dims(&[192, 256, 320]).is_err());
        let grown = cfg.with_stage_dims(&[192, 256, 256, 320]).unwrap();
        assert_eq!(grown.output_dim(), 320);
        grown.validate().unwrap();
    }

    #[test]
    fn growth_layouts_keep_stage_count() {
        for p in [Preset::PdsBase8, Preset::PdsBase16] {
            for mode in [DimsMode::WidthGrowth, DimsMode::DepthGrowth] {
                let (layers, dims) = growth_layout(p, mode).unwrap();
                let cfg = EncoderConfig::preset(p, 256)
                    .with_layer_counts(layers)
                    .unwrap()
                    .with_stage_dims(dims)
                    .unwrap()
                    .with_ffn_ratio(4);
                cfg.validate().unwrap();
                assert_eq!(cfg.stage_ffn_dim(0), 4 * dims[0]);
            }
        }
        assert!(growth_layout(Preset::Stack4, DimsMode::WidthGrowth).is_none());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut cfg = EncoderConfig::preset(Preset::Stack4, 16);
        cfg.stages[0].ds_kernel = 4;
        assert!(cfg.validate().is_err());
    }
}
