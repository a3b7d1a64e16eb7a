use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posenc::FourierConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Geglu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rmsnorm,
    Layernorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    /// Numerator and denominator of the FFN expansion ratio.
    pub ffn_ratio: [usize; 2],
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    /// Hidden width of the pooled-token reconstruction head.
    pub secondary_hidden: usize,
    pub n_freq: usize,
    pub s_t: f64,
    pub spatial_box: f64,
    pub activation: Activation,
    pub norm: NormKind,
    /// Samples per patch.
    pub patch_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    fn sized(depth: usize, heads: usize, dim: usize, n_freq: usize) -> Self {
        Self {
            depth,
            heads,
            dim,
            ffn_ratio: [8, 3],
            decoder_depth: 2,
            decoder_dim: dim,
            decoder_heads: heads,
            secondary_hidden: dim,
            n_freq,
            s_t: 1.0 / 32.0,
            spatial_box: 15.0,
            activation: Activation::Geglu,
            norm: NormKind::Rmsnorm,
            patch_len: 200,
        }
    }

    pub fn small() -> Self {
        Self::sized(4, 8, 512, 4)
    }

    pub fn base() -> Self {
        Self::sized(22, 8, 512, 4)
    }

    /// The published Large row. Its head count does not divide the width,
    /// so it fails validation and is kept as data only.
    pub fn large() -> Self {
        Self::sized(22, 19, 1250, 5)
    }

    /// Runnable Large variant with 25 heads of width 50.
    pub fn large_star() -> Self {
        Self::sized(22, 25, 1250, 5)
    }

    /// Desk-scale model used by the tests and examples.
    pub fn tiny() -> Self {
        Self {
            decoder_depth: 1,
            ..Self::sized(2, 2, 32, 2)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            "large_star" => Some(Self::large_star()),
            _ => None,
        }
    }

    pub fn fourier(&self) -> FourierConfig {
        FourierConfig {
            n_freq: self.n_freq,
            s_t: self.s_t,
            spatial_box: self.spatial_box,
        }
    }

    /// FFN hidden width: ⌊dim·num/den⌋ rounded down to a multiple of 8
    /// (never below 8).
    pub fn hidden_width(&self, dim: usize) -> usize {
        let raw = dim * self.ffn_ratio[0] / self.ffn_ratio[1].max(1);
        (raw / 8 * 8).max(8)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            v.push(format!("model.dim ({}) must be divisible by model.heads ({})", self.dim, self.heads));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            v.push(format!(
                "model.decoder_dim ({}) must be divisible by model.decoder_heads ({})",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.ffn_ratio[1] == 0 || self.ffn_ratio[0] == 0 {
            v.push("model.ffn_ratio entries must be positive".into());
        }
        if self.secondary_hidden == 0 {
            v.push("model.secondary_hidden must be >= 1".into());
        }
        if self.patch_len == 0 {
            v.push("model.patch_len must be >= 1".into());
        }
        v.extend(self.fourier().violations(self.dim).into_iter().map(|s| format!("model.{s}")));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn block_params(&self, dim: usize) -> usize {
        let h = self.hidden_width(dim);
        let ffn = match self.activation {
            Activation::Geglu => 3 * dim * h,
            Activation::Gelu => 2 * dim * h,
        };
        let norms = match self.norm {
            NormKind::Rmsnorm => 2 * dim,
            NormKind::Layernorm => 4 * dim,
        };
        4 * dim * dim + ffn + norms
    }

    /// Trainable parameters of the encoder: patch embedding, learned
    /// positional branch and the transformer blocks.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        self.patch_len * d + 4 * d + 4 * d + self.depth * self.block_params(d)
    }

    /// Everything used only for pretraining: decoder, mask token, pooling
    /// head and pooled-token reconstruction head.
    pub fn pretrain_head_param_count(&self) -> usize {
        let (d, e) = (self.dim, self.decoder_dim);
        let bridge = if e != d { d * e } else { 0 };
        let final_norm = match self.norm {
            NormKind::Rmsnorm => e,
            NormKind::Layernorm => 2 * e,
        };
        d + bridge
            + self.decoder_depth * self.block_params(e)
            + final_norm
            + e * self.patch_len
            + self.patch_len
            + d
            + 2 * d * d
            + d * self.secondary_hidden
            + self.secondary_hidden * self.patch_len
    }
}
