//! Low-rank adapters on the attention projections of the encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::params::init_tensor;
use crate::model::{ModelConfig, ParamKind, ParamSet, INIT_STD};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    fn key(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.rank == 0 || self.rank >= dim {
            v.push(format!("lora.rank {} must be in 1..{dim}", self.rank));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("lora.alpha {} must be > 0", self.alpha));
        }
        if self.targets.is_empty() {
            v.push("lora.targets must not be empty".into());
        }
        v
    }
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

fn target_names(cfg: &ModelConfig, lcfg: &LoraConfig) -> Vec<String> {
    (0..cfg.depth)
        .flat_map(|i| lcfg.targets.iter().map(move |t| format!("encoder.{i}.attn.{}", t.key())))
        .collect()
}

/// Adds `{W}.lora_a` (d_in×r, Normal(0, 0.02²)) and `{W}.lora_b` (r×d_out,
/// zero) next to every targeted projection. The forward pass picks them up
/// with scale alpha/rank.
pub fn lora_inject<F: Real>(params: &ParamSet<F>, cfg: &ModelConfig, lcfg: &LoraConfig) -> Result<ParamSet<F>> {
    let v = lcfg.violations(cfg.dim);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(lcfg.seed);
    for name in target_names(cfg, lcfg) {
        let w = params
            .get(&name)
            .ok_or_else(|| invalid(format!("adapter target {name} is not in the parameter set")))?;
        let [d_in, d_out] = w.shape();
        let a = init_tensor(ParamKind::LoraA, [d_in, lcfg.rank], INIT_STD, &mut rng);
        let b = init_tensor(ParamKind::LoraB, [lcfg.rank, d_out], INIT_STD, &mut rng);
        out.insert(format!("{name}.lora_a"), ParamKind::LoraA, a)?;
        out.insert(format!("{name}.lora_b"), ParamKind::LoraB, b)?;
    }
    Ok(out)
}

/// Folds every adapter into its base weight, `W ← W + scale·A·B`, and
/// removes the adapters.
pub fn lora_merge<F: Real>(params: &ParamSet<F>, scale: f64) -> Result<ParamSet<F>> {
    let mut out = params.clone();
    let bases: Vec<String> = params
        .names()
        .into_iter()
        .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_string))
        .collect();
    for base in bases {
        let a = params.get(&format!("{base}.lora_a")).expect("listed above");
        let b = params
            .get(&format!("{base}.lora_b"))
            .ok_or_else(|| invalid(format!("{base}.lora_a has no matching lora_b")))?;
        let mut delta = a.matmul(b);
        delta.scale_inplace(F::of(scale));
        let w = out
            .get_mut(&base)
            .ok_or_else(|| invalid(format!("adapter base {base} is missing")))?;
        if w.shape() != delta.shape() {
            return Err(Error::Shape(format!("{base}: {:?} vs adapter {:?}", w.shape(), delta.shape())));
        }
        w.add_assign(&delta);
    }
    out.remove_where(is_adapter);
    Ok(out)
}

/// Number of adapter parameters: Σ over targets of rank·(d_in + d_out).
pub fn lora_param_count(cfg: &ModelConfig, lcfg: &LoraConfig) -> usize {
    cfg.depth * lcfg.targets.len() * lcfg.rank * 2 * cfg.dim
}
