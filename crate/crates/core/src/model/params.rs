//! Name-keyed parameter registry.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{Activation, ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

/// The only bias in the network.
pub const DECODER_BIAS: &str = "decoder.out.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormOffset,
    /// Learned vectors such as the mask token and pooling queries.
    Embedding,
    LoraA,
    LoraB,
}

impl ParamKind {
    /// Excluded from weight decay.
    pub fn no_decay(self) -> bool {
        matches!(self, ParamKind::NormGain | ParamKind::NormOffset | ParamKind::Bias | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a tensor; a duplicate name is an error.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        Ok(())
    }

    /// Removes every parameter whose name satisfies `pred`, keeping order.
    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.params.retain(|p| !pred(&p.name));
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.position(name).map(move |i| &mut self.params[i].value)
    }

    pub fn by_index(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.params[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn n_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn n_elements_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| pred(&p.name)).map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over names and the f32 bit patterns of every value, restricted
    /// to parameters selected by `pred`.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                (v.f64() as f32).to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    /// Names of every bias-kind tensor.
    pub fn bias_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Bias)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Whether a parameter belongs to the encoder (the part kept after
/// pretraining).
pub fn is_encoder_param(name: &str) -> bool {
    name == "patch_embed" || name.starts_with("posenc.") || name.starts_with("encoder.")
}

fn norm_shapes(out: &mut Vec<(String, ParamKind, [usize; 2])>, prefix: &str, dim: usize, norm: NormKind) {
    out.push((format!("{prefix}.gain"), ParamKind::NormGain, [1, dim]));
    if norm == NormKind::Layernorm {
        out.push((format!("{prefix}.offset"), ParamKind::NormOffset, [1, dim]));
    }
}

fn block_shapes(out: &mut Vec<(String, ParamKind, [usize; 2])>, cfg: &ModelConfig, prefix: &str, dim: usize) {
    let h = cfg.hidden_width(dim);
    norm_shapes(out, &format!("{prefix}.attn_norm"), dim, cfg.norm);
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.attn.{p}"), ParamKind::Weight, [dim, dim]));
    }
    norm_shapes(out, &format!("{prefix}.ffn_norm"), dim, cfg.norm);
    out.push((format!("{prefix}.ffn.gate"), ParamKind::Weight, [dim, h]));
    if cfg.activation == Activation::Geglu {
        out.push((format!("{prefix}.ffn.value"), ParamKind::Weight, [dim, h]));
    }
    out.push((format!("{prefix}.ffn.out"), ParamKind::Weight, [h, dim]));
}

/// Names, kinds and shapes of the encoder, in registry order.
pub fn encoder_shapes(cfg: &ModelConfig) -> Vec<(String, ParamKind, [usize; 2])> {
    let d = cfg.dim;
    let mut out = vec![
        ("patch_embed".to_string(), ParamKind::Weight, [cfg.patch_len, d]),
        ("posenc.linear".to_string(), ParamKind::Weight, [4, d]),
        ("posenc.branch_norm.gain".to_string(), ParamKind::NormGain, [1, d]),
        ("posenc.branch_norm.offset".to_string(), ParamKind::NormOffset, [1, d]),
        ("posenc.out_norm.gain".to_string(), ParamKind::NormGain, [1, d]),
        ("posenc.out_norm.offset".to_string(), ParamKind::NormOffset, [1, d]),
    ];
    for i in 0..cfg.depth {
        block_shapes(&mut out, cfg, &format!("encoder.{i}"), d);
    }
    out
}

/// Pretraining-only tensors: mask token, decoder, pooling and secondary head.
pub fn pretrain_head_shapes(cfg: &ModelConfig) -> Vec<(String, ParamKind, [usize; 2])> {
    let (d, e, w) = (cfg.dim, cfg.decoder_dim, cfg.patch_len);
    let mut out = vec![("mask_token".to_string(), ParamKind::Embedding, [1, d])];
    if e != d {
        out.push(("decoder.bridge".to_string(), ParamKind::Weight, [d, e]));
    }
    for i in 0..cfg.decoder_depth {
        block_shapes(&mut out, cfg, &format!("decoder.{i}"), e);
    }
    norm_shapes(&mut out, "decoder.final_norm", e, cfg.norm);
    out.push(("decoder.out.weight".to_string(), ParamKind::Weight, [e, w]));
    out.push((DECODER_BIAS.to_string(), ParamKind::Bias, [1, w]));
    out.push(("pool.query".to_string(), ParamKind::Embedding, [1, d]));
    out.push(("pool.k".to_string(), ParamKind::Weight, [d, d]));
    out.push(("pool.v".to_string(), ParamKind::Weight, [d, d]));
    out.push(("secondary.fc1".to_string(), ParamKind::Weight, [d, cfg.secondary_hidden]));
    out.push(("secondary.fc2".to_string(), ParamKind::Weight, [cfg.secondary_hidden, w]));
    out
}

/// Fills a tensor according to its kind: weights and embeddings
/// Normal(0, sigma²), gains 1, offsets/biases 0, LoRA B 0.
pub fn init_tensor<F: Real>(kind: ParamKind, shape: [usize; 2], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    match kind {
        ParamKind::Weight | ParamKind::Embedding | ParamKind::LoraA => {
            let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
            let data = (0..shape[0] * shape[1]).map(|_| F::of(normal.sample(rng))).collect();
            Tensor::from_vec(shape[0], shape[1], data)
        }
        ParamKind::NormGain => Tensor::full(shape[0], shape[1], F::one()),
        ParamKind::NormOffset | ParamKind::Bias | ParamKind::LoraB => Tensor::zeros(shape[0], shape[1]),
    }
}

pub fn init_from_shapes<F: Real>(shapes: &[(String, ParamKind, [usize; 2])], sigma: f64, seed: u64) -> ParamSet<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, kind, shape) in shapes {
        set.insert(name.clone(), *kind, init_tensor(*kind, *shape, sigma, &mut rng))
            .expect("registry names are unique");
    }
    set
}

/// Encoder plus pretraining heads, deterministic under `seed`.
pub fn init_pretrain<F: Real>(cfg: &ModelConfig, sigma: f64, seed: u64) -> Result<ParamSet<F>> {
    cfg.validate()?;
    let mut shapes = encoder_shapes(cfg);
    shapes.extend(pretrain_head_shapes(cfg));
    Ok(init_from_shapes(&shapes, sigma, seed))
}

pub fn init_encoder<F: Real>(cfg: &ModelConfig, sigma: f64, seed: u64) -> Result<ParamSet<F>> {
    cfg.validate()?;
    Ok(init_from_shapes(&encoder_shapes(cfg), sigma, seed))
}

/// Checks that `set` carries every encoder tensor of `cfg` with the right
/// shape.
pub fn check_encoder(set: &ParamSet<impl Real>, cfg: &ModelConfig) -> Result<()> {
    let mut problems = Vec::new();
    for (name, _, shape) in encoder_shapes(cfg) {
        match set.get(&name) {
            None => problems.push(format!("missing {name}")),
            Some(t) if t.shape() != shape => problems.push(format!("{name}: {:?} != {shape:?}", t.shape())),
            _ => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_registry_matches_param_count() {
        for cfg in [ModelConfig::tiny(), ModelConfig::small()] {
            let n: usize = encoder_shapes(&cfg).iter().map(|(_, _, s)| s[0] * s[1]).sum();
            assert_eq!(n, cfg.param_count());
            let m: usize = pretrain_head_shapes(&cfg).iter().map(|(_, _, s)| s[0] * s[1]).sum();
            assert_eq!(m, cfg.pretrain_head_param_count());
        }
        let mut ln = ModelConfig::tiny();
        ln.norm = NormKind::Layernorm;
        ln.activation = Activation::Gelu;
        ln.decoder_dim = 16;
        let n: usize = encoder_shapes(&ln).iter().map(|(_, _, s)| s[0] * s[1]).sum();
        assert_eq!(n, ln.param_count());
        let m: usize = pretrain_head_shapes(&ln).iter().map(|(_, _, s)| s[0] * s[1]).sum();
        assert_eq!(m, ln.pretrain_head_param_count());
    }

    #[test]
    fn only_the_decoder_output_has_a_bias() {
        let p: ParamSet<f32> = init_pretrain(&ModelConfig::tiny(), INIT_STD, 0).unwrap();
        assert_eq!(p.bias_names(), vec![DECODER_BIAS]);
        assert!(p.names().iter().all(|n| !n.contains("bias") || *n == DECODER_BIAS));
    }

    #[test]
    fn init_statistics_and_determinism() {
        let mut cfg = ModelConfig::tiny();
        cfg.patch_len = 500;
        cfg.dim = 200 - 200 % 8;
        cfg.n_freq = 4;
        cfg.heads = 8;
        cfg.decoder_dim = cfg.dim;
        cfg.decoder_heads = 8;
        let p: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 9).unwrap();
        let w = p.get("patch_embed").unwrap();
        assert_eq!(w.len(), 100_000);
        let mean = w.sum() / w.len() as f64;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std / INIT_STD - 1.0).abs() < 0.03, "{std}");
        assert!(p.get("encoder.0.attn_norm.gain").unwrap().data().iter().all(|&g| g == 1.0));
        let again: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 9).unwrap();
        assert_eq!(p, again);
        assert_eq!(p.checksum(), again.checksum());
        let other: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 10).unwrap();
        assert_ne!(p.checksum(), other.checksum());
    }

    #[test]
    fn encoder_check_reports_missing_and_shape() {
        let cfg = ModelConfig::tiny();
        let mut p: ParamSet<f32> = init_encoder(&cfg, INIT_STD, 0).unwrap();
        assert!(check_encoder(&p, &cfg).is_ok());
        p.remove_where(|n| n == "encoder.1.attn.q");
        *p.get_mut("patch_embed").unwrap() = Tensor::zeros(3, 3);
        let err = check_encoder(&p, &cfg).unwrap_err().to_string();
        assert!(err.contains("encoder.1.attn.q") && err.contains("patch_embed"));
    }
}
