use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MfccConfig;

/// One LG-Block: strided temporal convolution followed by self-attention,
/// wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    /// Ablation switch: drop positional encoding and attention.
    #[serde(default = "yes")]
    pub attention: bool,
    /// Batch norm between attention and the residual add.
    #[serde(default = "yes")]
    pub post_attention_bn: bool,
}

fn default_kernel() -> usize {
    3
}

fn default_heads() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl LgBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            kernel: 3,
            attention_heads: 1,
            attention: true,
            post_attention_bn: true,
        }
    }

    /// Identity shortcut only when nothing about the shape changes.
    pub fn has_projection_shortcut(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    /// Scalars in the Q/K/V/O projections.
    pub fn attention_params(&self) -> usize {
        if self.attention {
            4 * (self.out_channels * self.out_channels + self.out_channels)
        } else {
            0
        }
    }

    pub fn param_count(&self) -> usize {
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut n = ci * co * self.kernel + co + 2 * co;
        n += self.attention_params();
        if self.post_attention_bn {
            n += 2 * co;
        }
        if self.has_projection_shortcut() {
            n += ci * co + co + 2 * co;
        }
        n
    }
}

/// Full network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgNetConfig {
    pub blocks: Vec<LgBlockConfig>,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub mfcc: MfccConfig,
}

fn default_input_channels() -> usize {
    40
}

fn default_embedding_dim() -> usize {
    128
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Lgnet3,
    Lgnet6,
    Custom,
}

fn chain(channels: &[usize], strides: &[usize]) -> Vec<LgBlockConfig> {
    let mut prev = 40;
    channels
        .iter()
        .zip(strides)
        .map(|(&c, &s)| {
            let b = LgBlockConfig::new(prev, c, s);
            prev = c;
            b
        })
        .collect()
}

impl LgNetConfig {
    /// Six blocks, 312,844 parameters at 12 classes.
    pub fn lgnet6(num_classes: usize) -> Self {
        Self::from_blocks(chain(&[52, 52, 78, 78, 104, 104], &[1, 2, 1, 2, 1, 2]), num_classes)
    }

    /// Three narrower blocks, 75,156 parameters at 12 classes.
    pub fn lgnet3(num_classes: usize) -> Self {
        Self::from_blocks(chain(&[40, 52, 68], &[1, 2, 2]), num_classes)
    }

    pub fn from_blocks(blocks: Vec<LgBlockConfig>, num_classes: usize) -> Self {
        Self {
            blocks,
            input_channels: 40,
            embedding_dim: 128,
            num_classes,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
            mfcc: MfccConfig::default(),
        }
    }

    pub fn preset(preset: ModelPreset, num_classes: usize) -> Option<Self> {
        match preset {
            ModelPreset::Lgnet3 => Some(Self::lgnet3(num_classes)),
            ModelPreset::Lgnet6 => Some(Self::lgnet6(num_classes)),
            ModelPreset::Custom => None,
        }
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.out_channels)
    }

    /// Time length after the block stack: iterated ceil division by strides.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.blocks.iter().fold(frames, |t, b| t.div_ceil(b.stride))
    }

    /// Trainable scalars in the extractor blocks.
    pub fn extractor_params(&self) -> usize {
        self.blocks.iter().map(LgBlockConfig::param_count).sum()
    }

    /// Trainable scalars in the embedding and classifier layers.
    pub fn head_params(&self) -> usize {
        let e = self.embedding_dim;
        self.last_channels() * e + e + e * self.num_classes + self.num_classes
    }

    /// Inference-time parameter count (text projection excluded).
    pub fn count_params(&self) -> usize {
        self.extractor_params() + self.head_params()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.blocks.is_empty() {
            return bad("model needs at least one block".into());
        }
        if self.blocks[0].in_channels != self.input_channels {
            return bad(format!(
                "first block takes {} channels but the input has {}",
                self.blocks[0].in_channels, self.input_channels
            ));
        }
        if self.input_channels != self.mfcc.n_coeffs {
            return bad(format!(
                "input_channels {} does not match mfcc.n_coeffs {}",
                self.input_channels, self.mfcc.n_coeffs
            ));
        }
        for (i, w) in self.blocks.windows(2).enumerate() {
            if w[0].out_channels != w[1].in_channels {
                return bad(format!("block {} outputs {} channels, block {} takes {}", i, w[0].out_channels, i + 1, w[1].in_channels));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !(b.stride == 1 || b.stride == 2) {
                return bad(format!("block {i}: stride must be 1 or 2"));
            }
            if b.kernel % 2 == 0 {
                return bad(format!("block {i}: kernel must be odd"));
            }
            if b.out_channels == 0 || b.attention_heads == 0 || b.out_channels % b.attention_heads != 0 {
                return bad(format!("block {i}: {} channels do not split into {} heads", b.out_channels, b.attention_heads));
            }
        }
        if self.embedding_dim == 0 || self.num_classes == 0 {
            return bad("embedding_dim and num_classes must be positive".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        self.mfcc.validate()
    }
}
