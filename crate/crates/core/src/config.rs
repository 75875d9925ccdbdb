//! JSON architecture/training description shared by the CLI and the model
//! file header.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Padding, ProjectionMode};
use crate::losses::LossKind;
use crate::optim::OptimizerConfig;
use crate::projections::Activation;
use crate::tensor::DEFAULT_INIT_STD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Initialization seed.
    #[serde(default)]
    pub seed: u64,
    /// Per-sample input shape, e.g. `[64]`, `[28, 28, 1]` or `[5]` for
    /// token sequences.
    pub input: Vec<usize>,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Held-out fraction when the data has no explicit validation split.
    #[serde(default = "default_split")]
    pub validation_split: f64,
    /// Seed for the validation split and epoch shuffling. Defaults to
    /// `seed + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
    #[serde(default = "default_std")]
    pub init_std: f64,
    /// Per-channel standardization with training-split statistics.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    pub layers: Vec<LayerConfig>,
}

fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}
fn default_split() -> f64 {
    0.1
}
fn default_std() -> f64 {
    DEFAULT_INIT_STD
}
fn default_alpha() -> usize {
    1
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub flip: bool,
    /// Zero padding for random crops; 0 disables cropping.
    #[serde(default)]
    pub crop_pad: usize,
    /// Random quarter-turn rotations (square images only).
    #[serde(default)]
    pub rotate: bool,
    /// Random channel permutation.
    #[serde(default)]
    pub channel_swap: bool,
}

impl AugmentConfig {
    /// Horizontal flips plus 4-pixel padded crops.
    pub fn standard() -> Self {
        Self {
            flip: true,
            crop_pad: 4,
            ..Self::default()
        }
    }

    pub fn is_noop(&self) -> bool {
        !self.flip && self.crop_pad == 0 && !self.rotate && !self.channel_swap
    }
}

/// One entry of `layers`. Input extents (`in`, `in_channels`, `input`) are
/// optional; when present they must match what the previous layer produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerConfig {
    Dense(DenseConfig),
    Conv2d(ConvConfig),
    Embedding(EmbeddingConfig),
    Lstm(LstmConfig),
    Relu(Empty),
    Sigmoid(Empty),
    Tanh(Empty),
    Maxpool(Empty),
    Gap(Empty),
    Flatten(Empty),
    Softmax(Empty),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseConfig {
    #[serde(default, rename = "in", skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    #[serde(rename = "out")]
    pub out_dim: usize,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    pub out_channels: usize,
    /// `[kernel_h, kernel_w]`.
    pub kernel: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub vocab: usize,
    pub dim: usize,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
    pub hidden: usize,
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    /// Emit `[T, H]` instead of the final hidden state.
    #[serde(default)]
    pub return_sequences: bool,
}

impl LayerConfig {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerConfig::Dense(_) => "dense",
            LayerConfig::Conv2d(_) => "conv2d",
            LayerConfig::Embedding(_) => "embedding",
            LayerConfig::Lstm(_) => "lstm",
            LayerConfig::Relu(_) => "relu",
            LayerConfig::Sigmoid(_) => "sigmoid",
            LayerConfig::Tanh(_) => "tanh",
            LayerConfig::Maxpool(_) => "maxpool",
            LayerConfig::Gap(_) => "gap",
            LayerConfig::Flatten(_) => "flatten",
            LayerConfig::Softmax(_) => "softmax",
        }
    }

    pub fn alpha(&self) -> usize {
        match self {
            LayerConfig::Dense(c) => c.alpha,
            LayerConfig::Conv2d(c) => c.alpha,
            LayerConfig::Embedding(c) => c.alpha,
            LayerConfig::Lstm(c) => c.alpha,
            _ => 1,
        }
    }
}

impl ArchitectureConfig {
    /// Parses and validates a JSON document. Errors carry the JSON path of
    /// the offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    /// Value checks the schema alone cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_split) {
            return Err(Error::config("validation_split", "must lie in [0, 1)"));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::config("init_std", "must be positive"));
        }
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::config("input", "must be a non-empty list of positive extents"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.alpha() == 0 {
                return Err(Error::config(format!("layers[{i}].alpha"), "must be at least 1"));
            }
        }
        Ok(())
    }
}
