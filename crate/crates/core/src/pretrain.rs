//! Masked-autoencoder pretraining: visible-token encoding, mask-token
//! decoding, the primary patch loss, the attention-pooled secondary loss,
//! the training loop and inference-time embedding extraction.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, L1Reduction, Var};
use crate::datapipe::{bucket_shuffle, make_batches, IndexEntry};
use crate::eeg_data::EegRecording;
use crate::error::{invalid, Error, Result};
use crate::masking::{make_mask, Mask, MaskParams};
use crate::model::layers::{norm, stack_forward};
use crate::model::{encoder_forward, init_pretrain, Binder, ModelConfig, ParamSet};
use crate::montage::{jitter_positions, JitterConfig};
use crate::optim::{scale_lr, stable_adamw_step, wsd_lr, AdamState, OptimConfig, ScheduleConfig};
use crate::patching::{segment, PatchConfig, PatchGrid};
use crate::posenc::{combine_graph, extend_positions, fourier_encode_coords, PosEncVars};
use crate::seeds::derive_seed;
use crate::tensor::{Real, Tensor};

/// Width the learning rate is quoted at.
pub const BASE_DIM: usize = 512;

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
const TAG_JITTER: u64 = 3;
const TAG_MASK: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Weight of the secondary loss.
    pub lambda: f64,
    pub l1_reduction: L1Reduction,
    pub mask: MaskParams,
    /// Standard deviation of electrode-position noise in cm.
    pub jitter_sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many steps; the schedule then spans exactly this
    /// horizon.
    pub max_steps: Option<usize>,
    pub warmup_frac: f64,
    pub stable_frac: f64,
    pub floor_frac: f64,
    pub cyclic: bool,
    /// Multiply the optimizer's peak rate by (dim/512)^-0.9.
    pub scale_lr_by_width: bool,
    pub init_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            l1_reduction: L1Reduction::PatchSum,
            mask: MaskParams::default(),
            jitter_sigma: 0.25,
            batch_size: 32,
            epochs: 1,
            max_steps: None,
            warmup_frac: 0.1,
            stable_frac: 0.8,
            floor_frac: 0.01,
            cyclic: false,
            scale_lr_by_width: true,
            init_std: crate::model::INIT_STD,
        }
    }
}

impl PretrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("pretrain.lambda {} must be >= 0", self.lambda));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            v.push(format!("pretrain.jitter_sigma {} must be >= 0", self.jitter_sigma));
        }
        if self.batch_size == 0 {
            v.push("pretrain.batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            v.push("pretrain.epochs must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            v.push("pretrain.max_steps must be >= 1 when set".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            v.push(format!("pretrain.init_std {} must be > 0", self.init_std));
        }
        v.extend(self.mask.violations().into_iter().map(|s| format!("pretrain.{s}")));
        v.extend(self.schedule(1).violations().into_iter().map(|s| format!("pretrain.{s}")));
        v
    }

    /// Schedule for a run of `steps_per_epoch` batches per epoch.
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        let (spe, epochs) = match self.max_steps {
            Some(n) if !self.cyclic => (n, 1),
            Some(n) => (steps_per_epoch, n.div_ceil(steps_per_epoch.max(1))),
            None => (steps_per_epoch, self.epochs),
        };
        ScheduleConfig {
            steps_per_epoch: spe,
            n_epochs: epochs,
            warmup_frac: self.warmup_frac,
            stable_frac: self.stable_frac,
            floor_frac: self.floor_frac,
            cyclic: self.cyclic,
        }
    }
}

/// One recording cut into patches, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// (C·p)×w, channel-major.
    pub patches: Tensor<f32>,
    pub positions: Vec<[f64; 3]>,
    pub n_channels: usize,
    pub n_patches: usize,
    /// Patch stride in seconds.
    pub stride_s: f64,
    pub label: Option<usize>,
}

impl Sample {
    pub fn from_recording(rec: &EegRecording, patch: &PatchConfig) -> Result<Self> {
        let positions = rec.positions.clone().ok_or_else(|| {
            invalid(format!(
                "recording {} has no electrode positions; resolve them through a montage first",
                rec.session_id
            ))
        })?;
        let grid = segment(rec, patch)?;
        Ok(Self::from_grid(&grid, positions, rec.sample_rate, rec.label))
    }

    pub fn from_grid(grid: &PatchGrid, positions: Vec<[f64; 3]>, sample_rate: f64, label: Option<usize>) -> Self {
        Self {
            patches: Tensor::from_vec(grid.n_tokens(), grid.config.w, grid.data().to_vec()),
            positions,
            n_channels: grid.n_channels,
            n_patches: grid.n_patches,
            stride_s: grid.config.stride() as f64 / sample_rate,
            label,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_channels * self.n_patches
    }
}

/// Model-side inputs of one sample: patch values plus the fixed Fourier
/// features and the 4-D coordinates feeding the learned branch.
#[derive(Clone, Debug)]
pub struct SampleInputs<F> {
    pub patches: Tensor<F>,
    pub fourier: Tensor<F>,
    pub ext: Tensor<F>,
    pub n_channels: usize,
    pub n_patches: usize,
}

impl<F: Real> SampleInputs<F> {
    pub fn new(patches: Tensor<F>, positions: &[[f64; 3]], n_patches: usize, cfg: &ModelConfig) -> Result<Self> {
        let c = positions.len();
        if patches.rows() != c * n_patches || patches.cols() != cfg.patch_len {
            return Err(Error::Shape(format!(
                "patches {:?} for {c} channels × {n_patches} patches of {} samples",
                patches.shape(),
                cfg.patch_len
            )));
        }
        let ext = extend_positions(positions, n_patches, &cfg.fourier())?;
        let fourier = fourier_encode_coords(&ext.coords, cfg.n_freq, cfg.dim).cast();
        Ok(Self {
            patches,
            fourier,
            ext: ext.to_tensor(),
            n_channels: c,
            n_patches,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_channels * self.n_patches
    }
}

/// Patch embedding `E = X·W` on plain tensors.
pub fn embed_patches(grid: &PatchGrid, weights: &Tensor<f32>) -> Result<Tensor<f32>> {
    if weights.rows() != grid.config.w {
        return Err(Error::Shape(format!(
            "embedding weights {:?} for {}-sample patches",
            weights.shape(),
            grid.config.w
        )));
    }
    let x = Tensor::from_vec(grid.n_tokens(), grid.config.w, grid.data().to_vec());
    Ok(x.matmul(weights))
}

/// Positional encoding of every token, N×D.
pub fn positional_encoding<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, inputs: &SampleInputs<F>) -> Var {
    let vars = PosEncVars {
        linear: b.bind(g, "posenc.linear"),
        branch_gain: b.bind(g, "posenc.branch_norm.gain"),
        branch_offset: b.bind(g, "posenc.branch_norm.offset"),
        out_gain: b.bind(g, "posenc.out_norm.gain"),
        out_offset: b.bind(g, "posenc.out_norm.offset"),
    };
    let f = g.constant(inputs.fourier.clone());
    let e = g.constant(inputs.ext.clone());
    combine_graph(g, f, e, &vars)
}

pub struct Encoded {
    pub states: Var,
    /// Post-FFN tokens of every encoder layer.
    pub record: Vec<Var>,
}

/// Runs the encoder on the visible tokens only. Masked patch values are
/// never copied into the graph.
pub fn encode_visible<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &ModelConfig,
    inputs: &SampleInputs<F>,
    pe: Var,
    mask: &Mask,
) -> Result<Encoded> {
    let vis = mask.visible_indices();
    if vis.is_empty() {
        return Err(invalid("mask leaves no visible token to encode"));
    }
    let x = g.constant(inputs.patches.gather_rows(&vis));
    let w = b.bind(g, "patch_embed");
    let e = g.matmul(x, w);
    let pe_vis = g.gather_rows(pe, &vis);
    let h = g.add(e, pe_vis);
    let (states, record) = encoder_forward(g, b, h, cfg)?;
    Ok(Encoded { states, record })
}

/// Full-length decoder sequence in the original (channel, patch) order:
/// encoded states in visible slots, the mask token in masked slots, and
/// the positional encoding added to both.
pub fn assemble_decoder_input<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, f_vis: Var, pe: Var, mask: &Mask) -> Result<Var> {
    let n_vis = mask.n_visible();
    let n_mask = mask.n_masked();
    if g.value(f_vis).rows() != n_vis || g.value(pe).rows() != n_vis + n_mask {
        return Err(Error::Shape(format!(
            "{} encoded states and {} encodings for {n_vis} visible of {} tokens",
            g.value(f_vis).rows(),
            g.value(pe).rows(),
            n_vis + n_mask
        )));
    }
    let mut parts = Vec::with_capacity(2);
    if n_vis > 0 {
        parts.push(f_vis);
    }
    if n_mask > 0 {
        let token = b.bind(g, "mask_token");
        parts.push(g.repeat_row(token, n_mask));
    }
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let mut slot = vec![0usize; n_vis + n_mask];
    let (mut iv, mut im) = (0, n_vis);
    for (i, &v) in mask.visible().iter().enumerate() {
        if v {
            slot[i] = iv;
            iv += 1;
        } else {
            slot[i] = im;
            im += 1;
        }
    }
    let ordered = g.gather_rows(stacked, &slot);
    Ok(g.add(ordered, pe))
}

/// Decoder transformer and output projection; returns the reconstruction
/// of the masked slots only, N_m×w.
pub fn decode_reconstruct<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, cfg: &ModelConfig, input: Var, mask: &Mask) -> Result<Var> {
    let mut h = input;
    if b.has("decoder.bridge") {
        let w = b.bind(g, "decoder.bridge");
        h = g.matmul(h, w);
    }
    let (h, _) = stack_forward(g, b, h, "decoder", cfg.decoder_depth, cfg.decoder_heads, cfg)?;
    let h = norm(g, b, h, "decoder.final_norm", cfg.norm);
    let hm = g.gather_rows(h, &mask.masked_indices());
    let w = b.bind(g, "decoder.out.weight");
    let bias = b.bind(g, "decoder.out.bias");
    let y = g.matmul(hm, w);
    Ok(g.add_row(y, bias))
}

pub fn primary_loss<F: Real>(g: &mut Graph<F>, recon: Var, truth: &Tensor<F>, reduction: L1Reduction) -> Result<Var> {
    if truth.rows() == 0 {
        return Err(invalid("no masked patch to reconstruct"));
    }
    if g.value(recon).shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.value(recon).shape(),
            truth.shape()
        )));
    }
    Ok(g.l1_loss(recon, truth, reduction))
}

/// One learned query attending over the tokens of every encoder layer.
pub fn attention_pool<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, record: &[Var]) -> Result<Var> {
    if record.is_empty() {
        return Err(invalid("attention pooling needs at least one encoder layer"));
    }
    let seq = if record.len() == 1 { record[0] } else { g.concat_rows(record) };
    let q = b.bind(g, "pool.query");
    let wk = b.bind(g, "pool.k");
    let wv = b.bind(g, "pool.v");
    let k = g.matmul(seq, wk);
    let v = g.matmul(seq, wv);
    let d = g.value(q).cols();
    Ok(g.attention(q, k, v, F::of(1.0 / (d as f64).sqrt())))
}

/// Pooled vector repeated per masked slot, plus that slot's positional
/// encoding, through a two-layer GELU network to w samples.
pub fn secondary_reconstruct<F: Real>(g: &mut Graph<F>, b: &mut Binder<F>, pooled: Var, pe_masked: Var) -> Var {
    let n = g.value(pe_masked).rows();
    let rep = g.repeat_row(pooled, n);
    let x = g.add(rep, pe_masked);
    let w1 = b.bind(g, "secondary.fc1");
    let w2 = b.bind(g, "secondary.fc2");
    let h = g.matmul(x, w1);
    let h = g.gelu(h);
    g.matmul(h, w2)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub primary: Var,
    pub secondary: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub primary: f64,
    pub secondary: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn read<F: Real>(g: &Graph<F>, vars: &LossVars, lambda: f64) -> Self {
        Self {
            primary: g.scalar(vars.primary).f64(),
            secondary: g.scalar(vars.secondary).f64(),
            total: g.scalar(vars.total).f64(),
            lambda,
        }
    }
}

/// Complete pretraining objective for one sample and one mask.
pub fn pretrain_forward<F: Real>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &ModelConfig,
    inputs: &SampleInputs<F>,
    mask: &Mask,
    lambda: f64,
    reduction: L1Reduction,
) -> Result<LossVars> {
    if mask.n_channels != inputs.n_channels || mask.n_patches != inputs.n_patches {
        return Err(Error::Shape(format!(
            "mask {}×{} for a {}×{} token grid",
            mask.n_channels, mask.n_patches, inputs.n_channels, inputs.n_patches
        )));
    }
    let masked = mask.masked_indices();
    let truth = inputs.patches.gather_rows(&masked);
    let pe = positional_encoding(g, b, inputs);
    let enc = encode_visible(g, b, cfg, inputs, pe, mask)?;
    let dec_in = assemble_decoder_input(g, b, enc.states, pe, mask)?;
    let recon = decode_reconstruct(g, b, cfg, dec_in, mask)?;
    let primary = primary_loss(g, recon, &truth, reduction)?;
    let pooled = attention_pool(g, b, &enc.record)?;
    let pe_m = g.gather_rows(pe, &masked);
    let sec = secondary_reconstruct(g, b, pooled, pe_m);
    let secondary = primary_loss(g, sec, &truth, reduction)?;
    let weighted = g.scale(secondary, F::of(lambda));
    let total = g.add(primary, weighted);
    Ok(LossVars { primary, secondary, total })
}

pub struct TrainState {
    pub params: ParamSet<f32>,
    pub opt: AdamState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &ModelConfig, pcfg: &PretrainConfig, seed: u64) -> Result<Self> {
        let params = init_pretrain(cfg, pcfg.init_std, derive_seed(seed, &[TAG_INIT]))?;
        let opt = AdamState::new(&params);
        Ok(Self { params, opt, step: 0 })
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub primary: f64,
    pub secondary: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Forward, backward and one optimizer update on a batch of samples that
/// share their token grid. Masks and position jitter are drawn from
/// `(seed, step, index within batch)`, so a step is reproducible on its own.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Sample],
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    ocfg: &OptimConfig,
    lr: f64,
    seed: u64,
) -> Result<StepLog> {
    let start = Instant::now();
    let first = batch.first().ok_or_else(|| invalid("empty batch"))?;
    if batch
        .iter()
        .any(|s| s.n_channels != first.n_channels || s.n_patches != first.n_patches)
    {
        return Err(invalid("samples of one batch must share channel and patch counts"));
    }
    let step = state.step;
    let mut sum: Vec<Option<Tensor<f32>>> = vec![None; state.params.len()];
    let mut losses = LossBreakdown {
        primary: 0.0,
        secondary: 0.0,
        total: 0.0,
        lambda: pcfg.lambda,
    };
    for (i, s) in batch.iter().enumerate() {
        let jitter = JitterConfig {
            sigma_noise: pcfg.jitter_sigma,
            seed: derive_seed(seed, &[TAG_JITTER, step, i as u64]),
        };
        let positions = jitter_positions(&s.positions, &jitter)?;
        let mask_seed = derive_seed(seed, &[TAG_MASK, step, i as u64]);
        let mask = make_mask(&positions, s.n_patches, &pcfg.mask, s.stride_s, mask_seed)?;
        let inputs = SampleInputs::new(s.patches.clone(), &positions, s.n_patches, cfg)?;

        let mut g = Graph::new();
        let mut b = Binder::new(&state.params);
        let vars = pretrain_forward(&mut g, &mut b, cfg, &inputs, &mask, pcfg.lambda, pcfg.l1_reduction)?;
        let l = LossBreakdown::read(&g, &vars, pcfg.lambda);
        if !(l.total.is_finite() && l.primary.is_finite() && l.secondary.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {step}, batch element {i}: primary {}, secondary {}",
                l.primary, l.secondary
            )));
        }
        losses.primary += l.primary;
        losses.secondary += l.secondary;
        losses.total += l.total;
        let mut grads = g.backward(vars.total);
        for (acc, gr) in sum.iter_mut().zip(b.gradients(&mut grads)) {
            match (acc.as_mut(), gr) {
                (Some(a), Some(gr)) => a.add_assign(&gr),
                (None, Some(gr)) => *acc = Some(gr),
                _ => {}
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    let mut sq = 0.0f64;
    for t in sum.iter_mut().flatten() {
        t.scale_inplace(inv);
        sq += t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {step}")));
    }
    stable_adamw_step(&mut state.params, &sum, &mut state.opt, ocfg, lr)?;
    state.step += 1;
    let n = batch.len() as f64;
    Ok(StepLog {
        step,
        lr,
        primary: losses.primary / n,
        secondary: losses.secondary / n,
        total: losses.total / n,
        grad_norm,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Peak learning rate actually used for `cfg`.
pub fn peak_lr(cfg: &ModelConfig, pcfg: &PretrainConfig, ocfg: &OptimConfig) -> Result<f64> {
    if pcfg.scale_lr_by_width {
        scale_lr(cfg.dim, BASE_DIM, ocfg.lr_peak)
    } else {
        Ok(ocfg.lr_peak)
    }
}

/// Full pretraining run from a fresh initialization. `on_step` sees every
/// log record as it is produced.
pub fn pretrain(
    samples: &[Sample],
    cfg: &ModelConfig,
    pcfg: &PretrainConfig,
    ocfg: &OptimConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainState> {
    let mut problems = cfg.violations();
    problems.extend(pcfg.violations());
    problems.extend(ocfg.violations());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let index: Vec<IndexEntry> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| IndexEntry {
            sample: i,
            channels: s.n_channels,
            patches: s.n_patches,
        })
        .collect();
    let spe = make_batches(&bucket_shuffle(&index, seed)?, pcfg.batch_size)?.len();
    let sched = pcfg.schedule(spe);
    let total = pcfg.max_steps.unwrap_or(spe * pcfg.epochs);
    let peak = peak_lr(cfg, pcfg, ocfg)?;

    let mut state = TrainState::init(cfg, pcfg, seed)?;
    let mut epoch = 0u64;
    while (state.step as usize) < total {
        let plan = bucket_shuffle(&index, derive_seed(seed, &[TAG_EPOCH, epoch]))?;
        for batch in make_batches(&plan, pcfg.batch_size)? {
            if state.step as usize >= total {
                break;
            }
            let members: Vec<&Sample> = batch.samples.iter().map(|&i| &samples[i]).collect();
            let lr = wsd_lr(state.step as usize, &sched, peak)?;
            let log = train_step(&mut state, &members, cfg, pcfg, ocfg, lr, seed)?;
            on_step(&log)?;
        }
        epoch += 1;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<F> {
    /// (C·p)×D token states, channel-major.
    pub tokens: Tensor<F>,
    /// 1×D attention-pooled vector when the pooling head is present.
    pub pooled: Option<Tensor<F>>,
}

/// Inference-time encoding of every token: no masking, no jitter.
pub fn extract_embeddings<F: Real>(
    patches: &Tensor<F>,
    positions: &[[f64; 3]],
    n_patches: usize,
    params: &ParamSet<F>,
    cfg: &ModelConfig,
) -> Result<Embeddings<F>> {
    let inputs = SampleInputs::new(patches.clone(), positions, n_patches, cfg)?;
    let mut g = Graph::new();
    let mut b = Binder::with_trainable(params, |_| false);
    let pe = positional_encoding(&mut g, &mut b, &inputs);
    let x = g.constant(inputs.patches.clone());
    let w = b.bind(&mut g, "patch_embed");
    let e = g.matmul(x, w);
    let h = g.add(e, pe);
    let (states, record) = encoder_forward(&mut g, &mut b, h, cfg)?;
    let pooled = if params.contains("pool.query") && !record.is_empty() {
        let v = attention_pool(&mut g, &mut b, &record)?;
        Some(g.value(v).clone())
    } else {
        None
    };
    Ok(Embeddings {
        tokens: g.value(states).clone(),
        pooled,
    })
}

pub fn embed_sample(sample: &Sample, params: &ParamSet<f32>, cfg: &ModelConfig) -> Result<Embeddings<f32>> {
    extract_embeddings(&sample.patches, &sample.positions, sample.n_patches, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskMode;
    use crate::model::INIT_STD;

    fn cfg16() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            decoder_dim: 16,
            decoder_heads: 2,
            secondary_hidden: 16,
            patch_len: 8,
            ..ModelConfig::tiny()
        }
    }

    fn positions(c: usize) -> Vec<[f64; 3]> {
        (0..c)
            .map(|i| {
                let a = i as f64 * 0.9;
                [8.0 * a.cos(), 8.0 * a.sin(), 3.0 + i as f64 * 0.5]
            })
            .collect()
    }

    fn patches(n: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_vec(
            n,
            w,
            (0..n * w).map(|i| ((i as f64 + seed as f64 * 3.1) * 0.37).sin()).collect(),
        )
    }

    fn mask_for(c: usize, p: usize, seed: u64) -> Mask {
        let params = MaskParams {
            mode: MaskMode::Random,
            ..MaskParams::default()
        };
        make_mask(&positions(c), p, &params, 0.9, seed).unwrap()
    }

    #[test]
    fn embedding_is_linear_and_bias_free() {
        let grid = |scale: f32| {
            let rec = EegRecording::new(
                (0..16).map(|i| scale * (i as f32 * 0.3).cos()).collect(),
                2,
                4.0,
                vec!["a".into(), "b".into()],
                "s",
                "u",
            )
            .unwrap();
            segment(&rec, &PatchConfig { w: 4, o: 0 }).unwrap()
        };
        let w = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f32 * 0.7).sin()).collect());
        let e1 = embed_patches(&grid(1.0), &w).unwrap();
        let e2 = embed_patches(&grid(2.5), &w).unwrap();
        for (a, b) in e1.data().iter().zip(e2.data()) {
            assert!((2.5 * a - b).abs() < 1e-5);
        }
        assert!(embed_patches(&grid(0.0), &w).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(embed_patches(&grid(1.0), &Tensor::zeros(5, 3)).is_err());
    }

    #[test]
    fn decoder_order_round_trip() {
        let cfg = cfg16();
        let params = init_pretrain::<f64>(&cfg, INIT_STD, 1).unwrap();
        let mask = mask_for(3, 4, 7);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        // Visible states tagged with their token index; zero encoding.
        let vis = mask.visible_indices();
        let tagged: Vec<Vec<f64>> = vis.iter().map(|&i| vec![i as f64; cfg.dim]).collect();
        let f = g.constant(Tensor::from_rows(&tagged));
        let pe = g.constant(Tensor::zeros(12, cfg.dim));
        let out = assemble_decoder_input(&mut g, &mut b, f, pe, &mask).unwrap();
        let token = params.get("mask_token").unwrap();
        for i in 0..12 {
            let row = g.value(out).row(i);
            if mask.visible()[i] {
                assert!(row.iter().all(|&v| v == i as f64));
            } else {
                assert_eq!(row, token.row(0));
            }
        }
        let bad = g.constant(Tensor::zeros(vis.len() + 1, cfg.dim));
        assert!(assemble_decoder_input(&mut g, &mut b, bad, pe, &mask).is_err());
    }

    #[test]
    fn zero_decoder_outputs_its_bias() {
        let cfg = cfg16();
        let mut params = init_pretrain::<f64>(&cfg, INIT_STD, 2).unwrap();
        *params.get_mut("decoder.out.weight").unwrap() = Tensor::zeros(cfg.dim, cfg.patch_len);
        let bias: Vec<f64> = (0..cfg.patch_len).map(|j| j as f64 - 3.0).collect();
        *params.get_mut("decoder.out.bias").unwrap() = Tensor::from_vec(1, cfg.patch_len, bias.clone());
        let mask = mask_for(3, 4, 1);
        let inputs = SampleInputs::new(patches(12, 8, 0), &positions(3), 4, &cfg).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let pe = positional_encoding(&mut g, &mut b, &inputs);
        let enc = encode_visible(&mut g, &mut b, &cfg, &inputs, pe, &mask).unwrap();
        let d = assemble_decoder_input(&mut g, &mut b, enc.states, pe, &mask).unwrap();
        let r = decode_reconstruct(&mut g, &mut b, &cfg, d, &mask).unwrap();
        assert_eq!(g.value(r).rows(), mask.n_masked());
        for i in 0..mask.n_masked() {
            assert_eq!(g.value(r).row(i), &bias[..]);
        }
    }

    #[test]
    fn offset_reconstruction_loss() {
        let mut g = Graph::<f64>::new();
        let truth = patches(5, 8, 3);
        let shifted = g.constant(truth.map(|v| v + 0.25));
        let sum = primary_loss(&mut g, shifted, &truth, L1Reduction::PatchSum).unwrap();
        assert!((g.scalar(sum) - 8.0 * 0.25).abs() < 1e-12);
        let mean = primary_loss(&mut g, shifted, &truth, L1Reduction::SampleMean).unwrap();
        assert!((g.scalar(mean) - 0.25).abs() < 1e-12);
        let exact = g.constant(truth.clone());
        let zero = primary_loss(&mut g, exact, &truth, L1Reduction::PatchSum).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        let empty = g.constant(Tensor::zeros(0, 8));
        assert!(primary_loss(&mut g, empty, &Tensor::zeros(0, 8), L1Reduction::PatchSum).is_err());
    }

    #[test]
    fn pooling_singleton_and_permutation() {
        let cfg = cfg16();
        let params = init_pretrain::<f64>(&cfg, 0.3, 3).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let tok = g.constant(patches(1, cfg.dim, 1));
        let pooled = attention_pool(&mut g, &mut b, &[tok]).unwrap();
        let expected = g.value(tok).matmul(params.get("pool.v").unwrap());
        assert!(g.value(pooled).max_abs_diff(&expected) < 1e-12);

        let a = g.constant(patches(4, cfg.dim, 2));
        let c = g.constant(patches(4, cfg.dim, 5));
        let p1 = attention_pool(&mut g, &mut b, &[a, c]).unwrap();
        let p2 = attention_pool(&mut g, &mut b, &[c, a]).unwrap();
        assert_eq!(g.value(p1), g.value(p2));
        assert!(attention_pool(&mut g, &mut b, &[]).is_err());
    }

    #[test]
    fn secondary_depends_on_encoding_only() {
        let cfg = cfg16();
        let params = init_pretrain::<f64>(&cfg, 0.3, 4).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let pooled = g.constant(patches(1, cfg.dim, 9));
        let row = patches(1, cfg.dim, 2).row(0).to_vec();
        let pe = g.constant(Tensor::from_rows(&[row.clone(), row]));
        let out = secondary_reconstruct(&mut g, &mut b, pooled, pe);
        assert_eq!(g.value(out).shape(), [2, cfg.patch_len]);
        assert_eq!(g.value(out).row(0), g.value(out).row(1));
    }

    #[test]
    fn loss_decomposition_and_zero_lambda() {
        let cfg = cfg16();
        let params = init_pretrain::<f64>(&cfg, INIT_STD, 5).unwrap();
        let mask = mask_for(3, 4, 2);
        let inputs = SampleInputs::new(patches(12, 8, 1), &positions(3), 4, &cfg).unwrap();
        for lambda in [0.1, 0.0] {
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let v = pretrain_forward(&mut g, &mut b, &cfg, &inputs, &mask, lambda, L1Reduction::PatchSum).unwrap();
            let l = LossBreakdown::read(&g, &v, lambda);
            assert!((l.total - (l.primary + lambda * l.secondary)).abs() < 1e-7);
            if lambda == 0.0 {
                assert_eq!(l.total, l.primary);
            }
        }
    }

    #[test]
    fn masked_values_do_not_reach_the_encoder() {
        let cfg = cfg16();
        let params = init_pretrain::<f64>(&cfg, 0.1, 6).unwrap();
        let mask = mask_for(3, 4, 3);
        let x = patches(12, 8, 2);
        let mut y = x.clone();
        for i in mask.masked_indices() {
            y.row_mut(i).iter_mut().for_each(|v| *v = *v * 100.0 + 7.0);
        }
        let run = |x: Tensor<f64>| {
            let inputs = SampleInputs::new(x, &positions(3), 4, &cfg).unwrap();
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let pe = positional_encoding(&mut g, &mut b, &inputs);
            let enc = encode_visible(&mut g, &mut b, &cfg, &inputs, pe, &mask).unwrap();
            g.value(enc.states).clone()
        };
        assert_eq!(run(x), run(y));
        let none = Mask::from_visible(vec![false; 12], 3, 4).unwrap();
        let inputs = SampleInputs::new(patches(12, 8, 2), &positions(3), 4, &cfg).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let pe = positional_encoding(&mut g, &mut b, &inputs);
        assert!(encode_visible(&mut g, &mut b, &cfg, &inputs, pe, &none).is_err());
    }

    #[test]
    fn embeddings_are_repeatable_and_d_wide() {
        let cfg = cfg16();
        let params = init_pretrain::<f32>(&cfg, INIT_STD, 7).unwrap();
        let x = patches(12, 8, 4).cast::<f32>();
        let a = extract_embeddings(&x, &positions(3), 4, &params, &cfg).unwrap();
        let b = extract_embeddings(&x, &positions(3), 4, &params, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.shape(), [12, 16]);
        assert_eq!(a.pooled.unwrap().shape(), [1, 16]);
    }

    #[test]
    fn train_step_is_deterministic_and_rejects_mixed_batches() {
        let cfg = ModelConfig {
            patch_len: 8,
            ..cfg16()
        };
        let pcfg = PretrainConfig::default();
        let ocfg = OptimConfig::default();
        let mk = |c: usize, seed: u64| Sample {
            patches: patches(c * 4, 8, seed).cast(),
            positions: positions(c),
            n_channels: c,
            n_patches: 4,
            stride_s: 0.9,
            label: None,
        };
        let samples = [mk(3, 0), mk(3, 1)];
        let batch: Vec<&Sample> = samples.iter().collect();
        let run = || {
            let mut st = TrainState::init(&cfg, &pcfg, 11).unwrap();
            let log = train_step(&mut st, &batch, &cfg, &pcfg, &ocfg, 1e-3, 11).unwrap();
            (st.params.checksum(), log.total, log.grad_norm)
        };
        assert_eq!(run(), run());
        let mixed = [mk(3, 0), mk(4, 1)];
        let refs: Vec<&Sample> = mixed.iter().collect();
        let mut st = TrainState::init(&cfg, &pcfg, 11).unwrap();
        assert!(train_step(&mut st, &refs, &cfg, &pcfg, &ocfg, 1e-3, 11).is_err());
        assert!(train_step(&mut st, &[], &cfg, &pcfg, &ocfg, 1e-3, 11).is_err());
    }

    #[test]
    fn schedule_follows_run_length() {
        let p = PretrainConfig {
            max_steps: Some(500),
            ..PretrainConfig::default()
        };
        assert_eq!(p.schedule(7).horizon(), 500);
        let p = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        };
        assert_eq!(p.schedule(7).horizon(), 21);
        assert!(PretrainConfig {
            batch_size: 0,
            lambda: -1.0,
            ..PretrainConfig::default()
        }
        .violations()
        .len()
            >= 2);
    }
}
