//! Training-time estimate from the dense-transformer FLOP count
//! τ = D·(6N + 12·L·H·Q·T) / (P·η).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsInputs {
    /// Tokens seen during training.
    pub tokens: f64,
    /// Model parameters.
    pub params: f64,
    /// Transformer layers (encoder plus decoder).
    pub layers: f64,
    pub heads: f64,
    pub head_dim: f64,
    /// Average tokens per sequence.
    pub seq_tokens: f64,
    /// Peak accelerator throughput in FLOP/s.
    pub peak_flops: f64,
    /// Model FLOPs utilization in (0, 1].
    pub mfu: f64,
}

impl Default for FlopsInputs {
    /// 60k hours, 1.1 overlap, 68 channels, 17 epochs on a 72M-parameter
    /// model with 23 layers of 8×64 heads, on a 312 TFLOP/s device at 50%.
    fn default() -> Self {
        Self {
            tokens: 60_000.0 * 3600.0 * 1.1 * 68.0 * 17.0,
            params: 72e6,
            layers: 23.0,
            heads: 8.0,
            head_dim: 64.0,
            seq_tokens: 68.0 * 11.0,
            peak_flops: 312e12,
            mfu: 0.5,
        }
    }
}

impl FlopsInputs {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("tokens", self.tokens),
            ("params", self.params),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("seq_tokens", self.seq_tokens),
            ("peak_flops", self.peak_flops),
            ("mfu", self.mfu),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("flops.{name} {x} must be finite and >= 0"));
            }
        }
        if !(self.peak_flops > 0.0) {
            v.push("flops.peak_flops must be > 0".into());
        }
        if !(self.mfu > 0.0 && self.mfu <= 1.0) {
            v.push(format!("flops.mfu {} must be in (0, 1]", self.mfu));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub flops_per_token: f64,
    pub total_flops: f64,
    pub seconds: f64,
    pub gpu_hours: f64,
}

pub fn flops_estimate(x: &FlopsInputs) -> Result<FlopsEstimate> {
    let v = x.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let flops_per_token = 6.0 * x.params + 12.0 * x.layers * x.heads * x.head_dim * x.seq_tokens;
    let total_flops = x.tokens * flops_per_token;
    let seconds = total_flops / (x.peak_flops * x.mfu);
    Ok(FlopsEstimate {
        flops_per_token,
        total_flops,
        seconds,
        gpu_hours: seconds / 3600.0,
    })
}
