//! StableAdamW (AdamW with per-tensor update-RMS clipping), the
//! warmup-stable-decay schedule and width-based learning-rate scaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2.4e-4,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-9,
            weight_decay: 0.01,
            clip_threshold: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            v.push(format!("optim.lr_peak {} must be >= 0", self.lr_peak));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                v.push(format!("optim.{n} {b} must be in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            v.push(format!("optim.epsilon {} must be > 0", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("optim.weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.clip_threshold > 0.0) {
            v.push(format!("optim.clip_threshold {} must be > 0", self.clip_threshold));
        }
        v
    }
}

/// First and second moments aligned with a `ParamSet`, plus the number of
/// updates applied to each tensor (frozen tensors do not advance).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: Vec<u64>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect(),
            t: vec![0; params.len()],
        }
    }
}

/// What happened to each tensor in one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// RMS of the unclipped update per tensor (`None` when skipped).
    pub update_rms: Vec<Option<f64>>,
    /// Effective learning rate per tensor.
    pub effective_lr: Vec<Option<f64>>,
}

fn adam_update<F: Real>(
    params: &mut ParamSet<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    cfg: &OptimConfig,
    lr: f64,
    clip: bool,
) -> Result<StepReport> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.by_index(i).value.shape() {
                return Err(Error::Shape(format!("gradient of {}", params.by_index(i).name)));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.by_index(i).name)));
            }
        }
    }
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one, eps) = (F::one(), F::of(cfg.epsilon));
    let mut report = StepReport {
        update_rms: vec![None; params.len()],
        effective_lr: vec![None; params.len()],
    };
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut u = Vec::with_capacity(g.len());
        for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            u.push(mhat / (vhat.sqrt() + eps));
        }
        let rms = (u.iter().map(|&x| x * x).sum::<F>() / F::of(u.len().max(1) as f64)).sqrt();
        let lr_t = if clip {
            F::of(lr) / F::one().max(rms / F::of(cfg.clip_threshold))
        } else {
            F::of(lr)
        };
        let decay = if params.by_index(i).kind.no_decay() {
            F::zero()
        } else {
            F::of(cfg.weight_decay)
        };
        for (p, &ui) in params.value_mut(i).data_mut().iter_mut().zip(&u) {
            *p = *p - lr_t * (ui + decay * *p);
        }
        report.update_rms[i] = Some(rms.f64());
        report.effective_lr[i] = Some(lr_t.f64());
    }
    Ok(report)
}

/// AdamW whose per-tensor step size is divided by max(1, RMS(u)/clip).
/// Tensors with a `None` gradient are left untouched.
pub fn stable_adamw_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<StepReport> {
    adam_update(params, grads, state, cfg, lr, true)
}

/// Plain decoupled-weight-decay AdamW, the reference for the clipped
/// variant.
pub fn adamw_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<StepReport> {
    adam_update(params, grads, state, cfg, lr, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps_per_epoch: usize,
    pub n_epochs: usize,
    /// Warmup length as a fraction of the first epoch.
    pub warmup_frac: f64,
    pub stable_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_frac: f64,
    /// Repeat stable + decay inside every epoch after a single warmup.
    pub cyclic: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps_per_epoch: 1000,
            n_epochs: 1,
            warmup_frac: 0.10,
            stable_frac: 0.80,
            floor_frac: 0.01,
            cyclic: false,
        }
    }
}

impl ScheduleConfig {
    pub fn horizon(&self) -> usize {
        self.steps_per_epoch * self.n_epochs
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps_per_epoch as f64).round() as usize
    }

    /// First and last step of the decay phase that covers `step`.
    fn decay_window(&self, step: usize) -> (usize, usize) {
        let frac = self.warmup_frac + self.stable_frac;
        if self.cyclic {
            let s = self.steps_per_epoch;
            let start = step / s * s;
            (start + (frac * s as f64).round() as usize, start + s - 1)
        } else {
            let h = self.horizon();
            ((frac * h as f64).round() as usize, h - 1)
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps_per_epoch == 0 || self.n_epochs == 0 {
            v.push("schedule.steps_per_epoch and schedule.n_epochs must be >= 1".into());
        }
        for (n, f) in [
            ("warmup_frac", self.warmup_frac),
            ("stable_frac", self.stable_frac),
            ("floor_frac", self.floor_frac),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                v.push(format!("schedule.{n} {f} must be in (0, 1]"));
            }
        }
        if self.warmup_frac + self.stable_frac > 1.0 {
            v.push("schedule.warmup_frac + schedule.stable_frac must not exceed 1".into());
        }
        v
    }
}

/// Piecewise-linear warmup / stable / decay learning rate at `step`
/// (0-based) of a horizon of `steps_per_epoch × n_epochs` steps.
pub fn wsd_lr(step: usize, sched: &ScheduleConfig, peak: f64) -> Result<f64> {
    let v = sched.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    if step >= sched.horizon() {
        return Err(invalid(format!("step {step} outside a horizon of {} steps", sched.horizon())));
    }
    let w = sched.warmup_steps();
    if step < w {
        return Ok(peak * step as f64 / w as f64);
    }
    let (d, end) = sched.decay_window(step);
    if step < d.max(w) {
        return Ok(peak);
    }
    if end <= d {
        return Ok(peak * sched.floor_frac);
    }
    let f = sched.floor_frac;
    Ok(peak * (f + (1.0 - f) * (end - step) as f64 / (end - d) as f64))
}

pub const LR_WIDTH_EXPONENT: f64 = -0.90;

/// `base_lr · (dim / base_dim)^(−0.9)`.
pub fn scale_lr(dim: usize, base_dim: usize, base_lr: f64) -> Result<f64> {
    if dim == 0 || base_dim == 0 {
        return Err(invalid("dimensions must be positive"));
    }
    Ok(base_lr * (dim as f64 / base_dim as f64).powf(LR_WIDTH_EXPONENT))
}

/// `step,lr` rows over the whole horizon.
pub fn lr_curve_csv(sched: &ScheduleConfig, peak: f64) -> Result<String> {
    let mut out = String::from("step,lr\n");
    for s in 0..sched.horizon() {
        out.push_str(&format!("{s},{:e}\n", wsd_lr(s, sched, peak)?));
    }
    Ok(out)
}
