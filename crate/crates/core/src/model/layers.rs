//! Transformer building blocks expressed on the autodiff graph.

use super::config::{Activation, ModelConfig, NormKind};
use super::params::ParamSet;
use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

/// Registers parameters on a graph on first use. Parameters marked frozen
/// enter the graph as constants and therefore get no gradient.
pub struct Binder<'p, F> {
    params: &'p ParamSet<F>,
    trainable: Vec<bool>,
    vars: Vec<Option<Var>>,
    lora_scale: F,
}

impl<'p, F: Real> Binder<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self::with_trainable(params, |_| true)
    }

    pub fn with_trainable(params: &'p ParamSet<F>, trainable: impl Fn(&str) -> bool) -> Self {
        Self {
            params,
            trainable: params.iter().map(|p| trainable(&p.name)).collect(),
            vars: vec![None; params.len()],
            lora_scale: F::one(),
        }
    }

    /// Multiplier alpha/rank applied to every low-rank adapter product.
    pub fn with_lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = F::of(scale);
        self
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Graph handle of `name`. Panics on an unknown name: every name used by
    /// the forward code comes from the registry of the same config.
    pub fn bind(&mut self, g: &mut Graph<F>, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} is not registered"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let value = self.params.by_index(i).value.clone();
        let v = if self.trainable[i] {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.vars[i] = Some(v);
        v
    }

    /// Gradients aligned with the registry; `None` for parameters that were
    /// not used or are frozen.
    pub fn gradients(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { v.and_then(|v| grads.take(v)) } else { None })
            .collect()
    }
}

pub fn norm<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, prefix: &str, kind: NormKind) -> Var {
    let gain = b.bind(g, &format!("{prefix}.gain"));
    match kind {
        NormKind::Rmsnorm => g.rmsnorm(x, gain, F::of(RMS_EPS)),
        NormKind::Layernorm => {
            let offset = b.bind(g, &format!("{prefix}.offset"));
            g.layernorm(x, Some(gain), Some(offset), F::of(LN_EPS))
        }
    }
}

/// `x·W`, plus `(alpha/rank)·(x·A)·B` when a low-rank adapter is registered under
/// `{name}.lora_a` / `{name}.lora_b`.
pub fn linear<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, name: &str) -> Var {
    let w = b.bind(g, name);
    let y = g.matmul(x, w);
    let a_name = format!("{name}.lora_a");
    if !b.has(&a_name) {
        return y;
    }
    let a = b.bind(g, &a_name);
    let bb = b.bind(g, &format!("{name}.lora_b"));
    let scale = b.lora_scale;
    let xa = g.matmul(x, a);
    let delta = g.matmul(xa, bb);
    let delta = g.scale(delta, scale);
    g.add(y, delta)
}

pub fn ffn<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, prefix: &str, act: Activation) -> Var {
    let gate = linear(g, b, x, &format!("{prefix}.gate"));
    let gate = g.gelu(gate);
    let hidden = match act {
        Activation::Geglu => {
            let value = linear(g, b, x, &format!("{prefix}.value"));
            g.mul(gate, value)
        }
        Activation::Gelu => gate,
    };
    linear(g, b, hidden, &format!("{prefix}.out"))
}

/// Non-causal multi-head self-attention without biases.
pub fn mha<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, prefix: &str, heads: usize) -> Var {
    let q = linear(g, b, x, &format!("{prefix}.q"));
    let k = linear(g, b, x, &format!("{prefix}.k"));
    let v = linear(g, b, x, &format!("{prefix}.v"));
    let dim = g.value(q).cols();
    let dh = dim / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            g.attention(qh, kh, vh, scale)
        })
        .collect();
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, b, cat, &format!("{prefix}.o"))
}

/// Pre-norm residual block: `x + mha(norm(x))`, then `h + ffn(norm(h))`.
pub fn block<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, prefix: &str, cfg: &ModelConfig, heads: usize) -> Var {
    let n1 = norm(g, b, x, &format!("{prefix}.attn_norm"), cfg.norm);
    let a = mha(g, b, n1, &format!("{prefix}.attn"), heads);
    let h = g.add(x, a);
    let n2 = norm(g, b, h, &format!("{prefix}.ffn_norm"), cfg.norm);
    let f = ffn(g, b, n2, &format!("{prefix}.ffn"), cfg.activation);
    g.add(h, f)
}

/// Runs `depth` blocks named `{stack}.{i}` and returns the final states
/// plus the post-FFN output of every block.
pub fn stack_forward<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    x: Var,
    stack: &str,
    depth: usize,
    heads: usize,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let mut h = x;
    let mut record = Vec::with_capacity(depth);
    for i in 0..depth {
        h = block(g, b, h, &format!("{stack}.{i}"), cfg, heads);
        if !g.value(h).all_finite() {
            return Err(Error::NonFinite(format!("activations after {stack} layer {i}")));
        }
        record.push(h);
    }
    Ok((h, record))
}

pub fn encoder_forward<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, x: Var, cfg: &ModelConfig) -> Result<(Var, Vec<Var>)> {
    stack_forward(g, b, x, "encoder", cfg.depth, cfg.heads, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::L1Reduction;
    use crate::model::params::{init_encoder, INIT_STD};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            decoder_dim: 16,
            ..ModelConfig::tiny()
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_vec(
            n,
            d,
            (0..n * d).map(|i| ((i as f64 + seed as f64 * 7.3) * 0.713).sin()).collect(),
        )
    }

    #[test]
    fn rmsnorm_unit_and_scale_invariance() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(2, 8, 1.0));
        let gain = g.constant(Tensor::full(1, 8, 1.0));
        let out = g.rmsnorm(ones, gain, RMS_EPS);
        assert!(g.value(out).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let x = random_tokens(3, 8, 1);
        let xs = x.map(|v| v * 7.5);
        let a = g.constant(x);
        let b = g.constant(xs);
        let na = g.rmsnorm(a, gain, RMS_EPS);
        let nb = g.rmsnorm(b, gain, RMS_EPS);
        assert!(g.value(na).max_abs_diff(g.value(nb)) < 1e-5);
    }

    #[test]
    fn ffn_of_zero_is_zero() {
        let cfg = small_cfg();
        let p: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 1).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let x = g.constant(Tensor::zeros(4, 16));
        let y = ffn(&mut g, &mut b, x, "encoder.0.ffn", cfg.activation);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = small_cfg();
        let p: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 2).unwrap();
        let x = random_tokens(1, 16, 3);
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let xv = g.constant(x.clone());
        let y = mha(&mut g, &mut b, xv, "encoder.0.attn", 2);
        let expected = x.matmul(p.get("encoder.0.attn.v").unwrap()).matmul(p.get("encoder.0.attn.o").unwrap());
        assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic_and_equivariant() {
        let cfg = small_cfg();
        let p: ParamSet<f64> = init_encoder(&cfg, 0.3, 4).unwrap();
        let x = random_tokens(6, 16, 5);
        let perm = [4usize, 2, 0, 5, 1, 3];
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::new(&p);
            let xv = g.constant(x);
            let (out, rec) = encoder_forward(&mut g, &mut b, xv, &cfg).unwrap();
            assert_eq!(rec.len(), cfg.depth);
            g.value(out).clone()
        };
        let a = run(x.clone());
        let b = run(x.gather_rows(&perm));
        assert_eq!(b, a.gather_rows(&perm));

        let mut g = Graph::new();
        let q = g.constant(random_tokens(5, 4, 1));
        let k = g.constant(random_tokens(5, 4, 2));
        let v = g.constant(random_tokens(5, 4, 3));
        let o = g.attention(q, k, v, 0.5);
        for r in 0..5 {
            let s: f64 = g.attention_probs(o).unwrap().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_depth_is_identity() {
        let cfg = ModelConfig { depth: 0, ..small_cfg() };
        let p: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 0).unwrap();
        let x = random_tokens(3, 16, 0);
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let xv = g.constant(x.clone());
        let (out, rec) = encoder_forward(&mut g, &mut b, xv, &cfg).unwrap();
        assert_eq!(g.value(out), &x);
        assert!(rec.is_empty());
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let cfg = small_cfg();
        let p: ParamSet<f64> = init_encoder(&cfg, INIT_STD, 0).unwrap();
        let mut x = random_tokens(3, 16, 0);
        x.set(1, 2, f64::INFINITY);
        let mut g = Graph::new();
        let mut b = Binder::new(&p);
        let xv = g.constant(x);
        let err = encoder_forward(&mut g, &mut b, xv, &cfg).unwrap_err();
        assert!(err.to_string().contains("encoder layer 0"), "{err}");
    }

    /// Central differences of a scalar loss w.r.t. every encoder parameter.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let p: ParamSet<f64> = init_encoder(&cfg, 0.3, 6).unwrap();
        let x = random_tokens(5, 16, 9);
        let target = random_tokens(5, 16, 10);
        let loss = |p: &ParamSet<f64>, grad: bool| -> (f64, Vec<Option<Tensor<f64>>>) {
            let mut g = Graph::new();
            let mut b = Binder::with_trainable(p, |n| n.starts_with("encoder."));
            let xv = g.constant(x.clone());
            let (out, _) = encoder_forward(&mut g, &mut b, xv, &cfg).unwrap();
            let l = g.l1_loss(out, &target, L1Reduction::SampleMean);
            let v = g.scalar(l);
            if !grad {
                return (v, Vec::new());
            }
            let mut grads = g.backward(l);
            (v, b.gradients(&mut grads))
        };
        let (_, grads) = loss(&p, true);
        let h = 1e-6;
        let mut checked = 0;
        for (i, param) in p.iter().enumerate() {
            if !param.name.starts_with("encoder.") {
                assert!(grads[i].is_none());
                continue;
            }
            let analytic = grads[i].as_ref().expect("encoder parameter has a gradient");
            for j in (0..param.value.len()).step_by(7) {
                let mut pp = p.clone();
                pp.value_mut(i).data_mut()[j] += h;
                let mut pm = p.clone();
                pm.value_mut(i).data_mut()[j] -= h;
                let fd = (loss(&pp, false).0 - loss(&pm, false).0) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-4),
                    "{}[{j}]: fd {fd} vs {a}",
                    param.name
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
