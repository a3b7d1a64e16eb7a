//! Linear probing on frozen encoder embeddings.

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricReport};
use crate::autodiff::Graph;
use crate::error::{invalid, Error, Result};
use crate::model::{is_encoder_param, Binder, ModelConfig, ParamKind, ParamSet};
use crate::optim::{stable_adamw_step, AdamState, OptimConfig};
use crate::pretrain::{embed_sample, Embeddings, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every token.
    Mean,
    /// The pretrained attention-pooling head.
    Attention,
    /// All token states concatenated; needs a fixed token grid.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub pooling: Pooling,
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Mean,
            classes: 2,
            epochs: 300,
            lr: 1e-2,
            weight_decay: 1e-4,
        }
    }
}

impl ProbeConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(format!("probe.classes {} must be >= 2", self.classes));
        }
        if self.epochs == 0 {
            v.push("probe.epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("probe.lr {} must be > 0", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("probe.weight_decay {} must be >= 0", self.weight_decay));
        }
        v
    }
}

/// Anything that maps samples to class probabilities.
pub trait SampleClassifier {
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>>;
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn sample_labels(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or_else(|| invalid(format!("sample {i} has no label"))))
        .collect()
}

/// Metrics of `model` on labelled samples.
pub fn evaluate_samples(model: &dyn SampleClassifier, samples: &[Sample]) -> Result<MetricReport> {
    let labels = sample_labels(samples)?;
    let probs = model.predict_proba(samples)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    evaluate(&labels, &preds, Some(&probs), model.n_classes())
}

pub fn pool_features(emb: &Embeddings<f32>, pooling: Pooling) -> Result<Vec<f32>> {
    match pooling {
        Pooling::Mean => {
            let (n, d) = (emb.tokens.rows(), emb.tokens.cols());
            let mut m = vec![0.0f32; d];
            for r in 0..n {
                for (a, &v) in m.iter_mut().zip(emb.tokens.row(r)) {
                    *a += v;
                }
            }
            Ok(m.into_iter().map(|v| v / n as f32).collect())
        }
        Pooling::Attention => emb
            .pooled
            .as_ref()
            .map(|t| t.data().to_vec())
            .ok_or_else(|| invalid("attention pooling needs the pretrained pooling head in the checkpoint")),
        Pooling::Flatten => Ok(emb.tokens.data().to_vec()),
    }
}

/// Softmax regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// D×K.
    pub weight: Tensor<f32>,
    /// 1×K.
    pub bias: Tensor<f32>,
}

impl LinearClassifier {
    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((&v, &m), &s)| (v - m) * s)
            .collect()
    }

    pub fn predict_proba(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let d = self.weight.rows();
        features
            .iter()
            .map(|f| {
                if f.len() != d {
                    return Err(Error::Shape(format!("feature of width {} for a {d}-wide probe", f.len())));
                }
                let x = Tensor::from_vec(1, d, self.standardize(f));
                let z = x.matmul(&self.weight);
                let logits: Vec<f64> = z.data().iter().zip(self.bias.data()).map(|(&a, &b)| (a + b) as f64).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                Ok(e.into_iter().map(|v| v / s).collect())
            })
            .collect()
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, l, 1.0);
    }
    t
}

/// Trains only the linear head (full-batch StableAdamW on cross-entropy)
/// and reports its metrics on the training features.
pub fn linear_probe(features: &[Vec<f32>], labels: &[usize], cfg: &ProbeConfig) -> Result<(LinearClassifier, MetricReport)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if features.len() != labels.len() || features.is_empty() {
        return Err(invalid(format!("{} features vs {} labels", features.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(invalid(format!("label {l} outside {} classes", cfg.classes)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(invalid("probe labels contain a single class"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features have different widths".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0f32; d];
    let mut inv_std = vec![0.0f32; d];
    for j in 0..d {
        let m = features.iter().map(|f| f[j] as f64).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[j] as f64 - m).powi(2)).sum::<f64>() / n;
        mean[j] = m as f32;
        inv_std[j] = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
    }
    let mut clf = LinearClassifier {
        mean,
        inv_std,
        weight: Tensor::zeros(d, cfg.classes),
        bias: Tensor::zeros(1, cfg.classes),
    };
    let x = Tensor::from_vec(
        features.len(),
        d,
        features.iter().flat_map(|f| clf.standardize(f)).collect(),
    );
    let target = one_hot(labels, cfg.classes);
    let mut params = ParamSet::new();
    params.insert("probe.weight", ParamKind::Weight, clf.weight.clone())?;
    params.insert("probe.bias", ParamKind::Bias, clf.bias.clone())?;
    let mut state = AdamState::new(&params);
    let ocfg = OptimConfig {
        lr_peak: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..OptimConfig::default()
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let xv = g.constant(x.clone());
        let w = b.bind(&mut g, "probe.weight");
        let bias = b.bind(&mut g, "probe.bias");
        let z = g.matmul(xv, w);
        let z = g.add_row(z, bias);
        let loss = g.soft_cross_entropy(z, &target);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite("probe loss".into()));
        }
        let mut grads = g.backward(loss);
        let grads = b.gradients(&mut grads);
        stable_adamw_step(&mut params, &grads, &mut state, &ocfg, cfg.lr)?;
    }
    clf.weight = params.get("probe.weight").unwrap().clone();
    clf.bias = params.get("probe.bias").unwrap().clone();
    let probs = clf.predict_proba(features)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let report = evaluate(labels, &preds, Some(&probs), cfg.classes)?;
    Ok((clf, report))
}

/// Frozen encoder, pooling and a trained linear head.
#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub encoder: ParamSet<f32>,
    pub config: ModelConfig,
    pub pooling: Pooling,
    pub classifier: LinearClassifier,
}

impl SampleClassifier for ProbeModel {
    fn n_classes(&self) -> usize {
        self.classifier.bias.cols()
    }

    fn predict_proba(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let feats = features_of(samples, &self.encoder, &self.config, self.pooling)?;
        self.classifier.predict_proba(&feats)
    }
}

pub fn features_of(samples: &[Sample], params: &ParamSet<f32>, cfg: &ModelConfig, pooling: Pooling) -> Result<Vec<Vec<f32>>> {
    samples
        .iter()
        .map(|s| pool_features(&embed_sample(s, params, cfg)?, pooling))
        .collect()
}

/// Embeds labelled samples with a frozen encoder and fits a probe on them.
/// Fails if the encoder parameters changed during probing.
pub fn probe_encoder(
    train: &[Sample],
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    pcfg: &ProbeConfig,
) -> Result<(ProbeModel, MetricReport)> {
    let before = params.checksum_where(is_encoder_param);
    let labels = sample_labels(train)?;
    let feats = features_of(train, params, cfg, pcfg.pooling)?;
    let (classifier, report) = linear_probe(&feats, &labels, pcfg)?;
    let after = params.checksum_where(is_encoder_param);
    if before != after {
        return Err(Error::Manifest("encoder parameters changed during probing".into()));
    }
    Ok((
        ProbeModel {
            encoder: params.clone(),
            config: cfg.clone(),
            pooling: pcfg.pooling,
            classifier,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features() {
        let feats: Vec<Vec<f32>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + 0.1 * (i as f32).sin(), (i as f32 * 0.7).cos()])
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let (clf, r) = linear_probe(&feats, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.balanced_accuracy, Some(1.0));
        assert_eq!(clf.weight.shape(), [2, 2]);
    }

    #[test]
    fn single_class_and_bad_config() {
        let feats = vec![vec![0.0f32; 3]; 4];
        assert!(linear_probe(&feats, &[1, 1, 1, 1], &ProbeConfig::default()).is_err());
        let bad = ProbeConfig {
            classes: 1,
            ..ProbeConfig::default()
        };
        assert!(matches!(linear_probe(&feats, &[0, 0, 0, 0], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn mean_pooling_and_flatten() {
        let emb = Embeddings {
            tokens: Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]),
            pooled: None,
        };
        assert_eq!(pool_features(&emb, Pooling::Mean).unwrap(), vec![2.0, 4.0]);
        assert_eq!(pool_features(&emb, Pooling::Flatten).unwrap(), vec![1.0, 2.0, 3.0, 6.0]);
        assert!(pool_features(&emb, Pooling::Attention).is_err());
    }
}
