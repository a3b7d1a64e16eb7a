//! One continuous fine-tuning run: a head-only phase with the backbone
//! frozen, then joint training, with warmup, reduce-on-plateau, mixup and
//! dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{is_adapter, lora_inject, lora_merge, LoraConfig};
use super::metrics::MetricReport;
use super::mixup::{draw_lambda, mix_with};
use super::probe::{evaluate_samples, sample_labels, SampleClassifier};
use crate::autodiff::{Graph, Var};
use crate::datapipe::{bucket_shuffle, make_batches, IndexEntry};
use crate::error::{invalid, Error, Result};
use crate::model::params::{check_encoder, init_tensor};
use crate::model::{encoder_forward, is_encoder_param, Binder, ModelConfig, ParamKind, ParamSet, INIT_STD};
use crate::optim::{stable_adamw_step, AdamState, OptimConfig};
use crate::pretrain::{attention_pool, positional_encoding, Sample, SampleInputs};
use crate::seeds::derive_seed;
use crate::tensor::{Real, Tensor};

const TAG_HEAD: u64 = 11;
const TAG_EPOCH: u64 = 12;
const TAG_MIX: u64 = 13;
const TAG_DROP: u64 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetunePlan {
    /// Steps during which only the head (and adapters) train.
    pub freeze_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Zero disables mixup.
    pub mixup_alpha: f64,
    /// Dropout on the pooled vector before the linear head.
    pub dropout: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Validation cadence in steps.
    pub eval_every: usize,
    pub lora: Option<LoraConfig>,
    /// Train the adapters during the frozen phase as well.
    pub lora_during_freeze: bool,
    /// Unfreeze the full backbone after `freeze_steps` (otherwise only the
    /// adapters and head keep training).
    pub unfreeze_backbone: bool,
    pub seed: u64,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            freeze_steps: 100,
            total_steps: 400,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            mixup_alpha: 0.2,
            dropout: 0.1,
            plateau_patience: 3,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            eval_every: 20,
            lora: None,
            lora_during_freeze: true,
            unfreeze_backbone: true,
            seed: 0,
        }
    }
}

impl FinetunePlan {
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.total_steps == 0 {
            v.push("finetune.total_steps must be >= 1".into());
        }
        if self.freeze_steps > self.total_steps {
            v.push(format!(
                "finetune.freeze_steps ({}) must not exceed total_steps ({})",
                self.freeze_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            v.push("finetune.batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("finetune.lr {} must be > 0", self.lr));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            v.push(format!("finetune.mixup_alpha {} must be >= 0", self.mixup_alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("finetune.dropout {} must be in [0, 1)", self.dropout));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            v.push(format!("finetune.plateau_factor {} must be in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            v.push("finetune.plateau_patience must be >= 1".into());
        }
        if self.eval_every == 0 {
            v.push("finetune.eval_every must be >= 1".into());
        }
        if let Some(l) = &self.lora {
            v.extend(l.violations(dim).into_iter().map(|s| format!("finetune.{s}")));
        }
        v
    }
}

/// Multiplies the rate by `factor` after `patience` consecutive
/// observations without improvement on the best value so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub lr: f64,
    best: f64,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            lr,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns true when this observation triggered a reduction.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad = 0;
            return true;
        }
        false
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("pool.")
}

pub fn is_backbone_param(name: &str) -> bool {
    is_encoder_param(name) && !is_adapter(name)
}

/// Encoder tensors of `pretrained` plus a classification head: the
/// pretrained pooling head when present (fresh otherwise) and a linear
/// layer `head.weight`/`head.bias`.
pub fn init_classifier(pretrained: &ParamSet<f32>, cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<ParamSet<f32>> {
    if n_classes < 2 {
        return Err(invalid("a classifier needs at least two classes"));
    }
    check_encoder(pretrained, cfg)?;
    let mut out = ParamSet::new();
    for p in pretrained.iter().filter(|p| is_encoder_param(&p.name) || p.name.starts_with("pool.")) {
        out.insert(p.name.clone(), p.kind, p.value.clone())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_HEAD]));
    let d = cfg.dim;
    for (name, kind, shape) in [
        ("pool.query", ParamKind::Embedding, [1, d]),
        ("pool.k", ParamKind::Weight, [d, d]),
        ("pool.v", ParamKind::Weight, [d, d]),
        ("head.weight", ParamKind::Weight, [d, n_classes]),
        ("head.bias", ParamKind::Bias, [1, n_classes]),
    ] {
        if !out.contains(name) {
            out.insert(name, kind, init_tensor(kind, shape, INIT_STD, &mut rng))?;
        }
    }
    Ok(out)
}

/// Logits (1×K) of one sample: all tokens encoded, attention-pooled over
/// every layer, optional dropout mask, linear head.
pub fn classifier_logits<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &ModelConfig,
    inputs: &SampleInputs<F>,
    dropout_mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let pe = positional_encoding(g, b, inputs);
    let x = g.constant(inputs.patches.clone());
    let w = b.bind(g, "patch_embed");
    let e = g.matmul(x, w);
    let h = g.add(e, pe);
    let (_, record) = encoder_forward(g, b, h, cfg)?;
    let mut pooled = attention_pool(g, b, &record)?;
    if let Some(m) = dropout_mask {
        let mv = g.constant(m.clone());
        pooled = g.mul(pooled, mv);
    }
    let hw = b.bind(g, "head.weight");
    let hb = b.bind(g, "head.bias");
    let z = g.matmul(pooled, hw);
    Ok(g.add_row(z, hb))
}

#[derive(Clone, Debug)]
pub struct FinetunedModel {
    pub params: ParamSet<f32>,
    pub config: ModelConfig,
    pub lora_scale: f64,
    pub n_classes: usize,
}

impl FinetunedModel {
    /// Same model with adapters folded into the base weights.
    pub fn merged(&self) -> Result<Self> {
        Ok(Self {
            params: lora_merge(&self.params, self.lora_scale)?,
            ..self.clone()
        })
    }

    pub fn logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        let inputs = SampleInputs::new(sample.patches.clone(), &sample.positions, sample.n_patches, &self.config)?;
        let mut g = Graph::new();
        let mut b = Binder::with_trainable(&self.params, |_| false).with_lora_scale(self.lora_scale);
        let z = classifier_logits(&mut g, &mut b, &self.config, &inputs, None)?;
        Ok(g.value(z).data().iter().map(|&v| v as f64).collect())
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl SampleClassifier for FinetunedModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| Ok(softmax(&self.logits(s)?))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Frozen,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub backbone_grad_norm: f64,
    pub head_grad_norm: f64,
    pub val_loss: Option<f64>,
    pub lr_reduced: bool,
}

pub struct FinetuneOutcome {
    pub model: FinetunedModel,
    pub logs: Vec<FinetuneLog>,
    pub val_metrics: Option<MetricReport>,
}

fn mean_val_loss(model: &FinetunedModel, val: &[Sample]) -> Result<f64> {
    let labels = sample_labels(val)?;
    let probs = model.predict_proba(val)?;
    Ok(probs
        .iter()
        .zip(&labels)
        .map(|(p, &l)| -(p[l].max(1e-300)).ln())
        .sum::<f64>()
        / val.len() as f64)
}

fn norm_where(params: &ParamSet<f32>, grads: &[Option<Tensor<f32>>], pred: impl Fn(&str) -> bool) -> f64 {
    params
        .iter()
        .zip(grads)
        .filter(|(p, _)| pred(&p.name))
        .filter_map(|(_, g)| g.as_ref())
        .map(|g| g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Fine-tunes `pretrained` on labelled samples. Validation loss drives the
/// plateau scheduler; with no validation samples the training loss does.
#[allow(clippy::too_many_arguments)]
pub fn two_step_finetune(
    pretrained: &ParamSet<f32>,
    cfg: &ModelConfig,
    train: &[Sample],
    val: &[Sample],
    n_classes: usize,
    plan: &FinetunePlan,
    mut on_step: impl FnMut(&FinetuneLog) -> Result<()>,
) -> Result<FinetuneOutcome> {
    let v = plan.violations(cfg.dim);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let labels = sample_labels(train)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!("label {l} outside {n_classes} classes")));
    }
    let mut params = init_classifier(pretrained, cfg, n_classes, plan.seed)?;
    let mut lora_scale = 1.0;
    if let Some(l) = &plan.lora {
        params = lora_inject(&params, cfg, l)?;
        lora_scale = l.scale();
    }
    let mut opt = AdamState::new(&params);
    let ocfg = OptimConfig {
        lr_peak: plan.lr,
        weight_decay: plan.weight_decay,
        ..OptimConfig::default()
    };
    let index: Vec<IndexEntry> = train
        .iter()
        .enumerate()
        .map(|(i, s)| IndexEntry {
            sample: i,
            channels: s.n_channels,
            patches: s.n_patches,
        })
        .collect();
    let mut plateau = ReduceOnPlateau::new(plan.lr, plan.plateau_factor, plan.plateau_patience, plan.min_lr);
    let mut logs = Vec::with_capacity(plan.total_steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut recent = Vec::new();
    while step < plan.total_steps {
        let plan_e = bucket_shuffle(&index, derive_seed(plan.seed, &[TAG_EPOCH, epoch]))?;
        for batch in make_batches(&plan_e, plan.batch_size)? {
            if step >= plan.total_steps {
                break;
            }
            let phase = if step < plan.freeze_steps { Phase::Frozen } else { Phase::Joint };
            let trainable = |name: &str| match phase {
                Phase::Frozen => is_head_param(name) || (plan.lora_during_freeze && is_adapter(name)),
                Phase::Joint => {
                    is_head_param(name) || is_adapter(name) || (plan.unfreeze_backbone && is_backbone_param(name))
                }
            };
            let members: Vec<&Sample> = batch.samples.iter().map(|&i| &train[i]).collect();
            let xs: Vec<Tensor<f32>> = members.iter().map(|s| s.patches.clone()).collect();
            let ys: Vec<Vec<f64>> = members
                .iter()
                .map(|s| {
                    let mut y = vec![0.0; n_classes];
                    y[s.label.expect("checked above")] = 1.0;
                    y
                })
                .collect();
            let mixed = if plan.mixup_alpha > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[TAG_MIX, step as u64]));
                let lambda = draw_lambda(plan.mixup_alpha, &mut rng)?;
                let mut perm: Vec<usize> = (0..xs.len()).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                mix_with(&xs, &ys, lambda, &perm)?
            } else {
                mix_with(&xs, &ys, 1.0, &(0..xs.len()).collect::<Vec<_>>())?
            };

            let mut sum: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
            let mut loss_sum = 0.0;
            for (i, s) in members.iter().enumerate() {
                let inputs = SampleInputs::new(mixed.xs[i].clone(), &s.positions, s.n_patches, cfg)?;
                let drop = (plan.dropout > 0.0).then(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[TAG_DROP, step as u64, i as u64]));
                    let keep = 1.0 / (1.0 - plan.dropout) as f32;
                    Tensor::from_vec(
                        1,
                        cfg.dim,
                        (0..cfg.dim)
                            .map(|_| if rng.random::<f64>() < plan.dropout { 0.0 } else { keep })
                            .collect(),
                    )
                });
                let mut g = Graph::new();
                let mut b = Binder::with_trainable(&params, trainable).with_lora_scale(lora_scale);
                let z = classifier_logits(&mut g, &mut b, cfg, &inputs, drop.as_ref())?;
                let target = Tensor::from_vec(1, n_classes, mixed.ys[i].iter().map(|&v| v as f32).collect());
                let loss = g.soft_cross_entropy(z, &target);
                let l = g.scalar(loss) as f64;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("fine-tuning loss at step {step}, batch element {i}")));
                }
                loss_sum += l;
                let mut grads = g.backward(loss);
                for (acc, gr) in sum.iter_mut().zip(b.gradients(&mut grads)) {
                    match (acc.as_mut(), gr) {
                        (Some(a), Some(gr)) => a.add_assign(&gr),
                        (None, Some(gr)) => *acc = Some(gr),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / members.len() as f32;
            for t in sum.iter_mut().flatten() {
                t.scale_inplace(inv);
            }
            let lr = if step < plan.warmup_steps {
                plateau.lr * (step + 1) as f64 / plan.warmup_steps as f64
            } else {
                plateau.lr
            };
            let backbone_grad_norm = norm_where(&params, &sum, is_backbone_param);
            let head_grad_norm = norm_where(&params, &sum, is_head_param);
            stable_adamw_step(&mut params, &sum, &mut opt, &ocfg, lr)?;
            let loss = loss_sum / members.len() as f64;
            recent.push(loss);

            let mut val_loss = None;
            let mut lr_reduced = false;
            if (step + 1) % plan.eval_every == 0 {
                let observed = if val.is_empty() {
                    recent.iter().sum::<f64>() / recent.len() as f64
                } else {
                    let model = FinetunedModel {
                        params: params.clone(),
                        config: cfg.clone(),
                        lora_scale,
                        n_classes,
                    };
                    mean_val_loss(&model, val)?
                };
                recent.clear();
                val_loss = Some(observed);
                if step >= plan.warmup_steps {
                    lr_reduced = plateau.observe(observed);
                }
            }
            let log = FinetuneLog {
                step,
                phase,
                lr,
                loss,
                backbone_grad_norm,
                head_grad_norm,
                val_loss,
                lr_reduced,
            };
            on_step(&log)?;
            logs.push(log);
            step += 1;
        }
        epoch += 1;
    }
    let model = FinetunedModel {
        params,
        config: cfg.clone(),
        lora_scale,
        n_classes,
    };
    let val_metrics = if val.is_empty() { None } else { Some(evaluate_samples(&model, val)?) };
    Ok(FinetuneOutcome { model, logs, val_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_plateau_trace() {
        let mut p = ReduceOnPlateau::new(1.0, 0.5, 2, 0.1);
        let trace = [1.0, 0.9, 0.95, 0.92, 0.91, 0.8, 0.85, 0.85, 0.85, 0.85, 0.85, 0.85];
        let fired: Vec<bool> = trace.iter().map(|&l| p.observe(l)).collect();
        assert_eq!(
            fired,
            [false, false, false, true, false, false, false, true, false, true, false, true]
        );
        // 1 → 0.5 → 0.25 → 0.125 → floor 0.1.
        assert_eq!(p.lr, 0.1);
    }

    #[test]
    fn plan_validation() {
        let p = FinetunePlan {
            freeze_steps: 10,
            total_steps: 5,
            dropout: 1.0,
            ..FinetunePlan::default()
        };
        assert_eq!(p.violations(32).len(), 2);
        let limit = FinetunePlan {
            freeze_steps: 5,
            total_steps: 5,
            ..FinetunePlan::default()
        };
        assert!(limit.violations(32).is_empty());
    }

    #[test]
    fn parameter_groups() {
        assert!(is_backbone_param("encoder.0.attn.q"));
        assert!(!is_backbone_param("encoder.0.attn.q.lora_a"));
        assert!(is_head_param("pool.query") && is_head_param("head.bias"));
        assert!(!is_head_param("patch_embed"));
    }
}
