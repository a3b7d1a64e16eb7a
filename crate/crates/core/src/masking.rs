//! Token masks over the channel × patch grid: spatio-temporal block masking
//! and uniform random masking, both with an exact masked count.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Block,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    /// Fraction of tokens masked.
    pub m_r: f64,
    /// Spatial radius in cm.
    pub r_s: f64,
    /// Temporal radius in seconds.
    pub r_t: f64,
    /// Probability that a seed drops whole channels.
    pub d_r: f64,
    /// Channel-drop radius in cm.
    pub r_d: f64,
    pub mode: MaskMode,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            m_r: 0.55,
            r_s: 3.0,
            r_t: 3.0,
            d_r: 0.10,
            r_d: 4.0,
            mode: MaskMode::Block,
        }
    }
}

impl MaskParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.m_r) {
            v.push(format!("mask.m_r {} must be in [0, 1]", self.m_r));
        }
        if !(0.0..=1.0).contains(&self.d_r) {
            v.push(format!("mask.d_r {} must be in [0, 1]", self.d_r));
        }
        for (name, r) in [("r_s", self.r_s), ("r_t", self.r_t), ("r_d", self.r_d)] {
            if !(r >= 0.0 && r.is_finite()) {
                v.push(format!("mask.{name} {r} must be >= 0"));
            }
        }
        v
    }

    fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Number of masked tokens for `n` tokens at ratio `m_r`.
pub fn mask_target(n: usize, m_r: f64) -> usize {
    ((m_r * n as f64).round() as usize).min(n)
}

/// Visibility of each token, channel-major; `true` = visible (1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    visible: Vec<bool>,
    pub n_channels: usize,
    pub n_patches: usize,
}

impl Mask {
    pub fn all_visible(c: usize, p: usize) -> Self {
        Self {
            visible: vec![true; c * p],
            n_channels: c,
            n_patches: p,
        }
    }

    pub fn from_visible(visible: Vec<bool>, c: usize, p: usize) -> Result<Self> {
        if visible.len() != c * p {
            return Err(Error::Shape(format!("{} mask entries for {c}x{p}", visible.len())));
        }
        Ok(Self {
            visible,
            n_channels: c,
            n_patches: p,
        })
    }

    pub fn is_visible(&self, c: usize, k: usize) -> bool {
        self.visible[c * self.n_patches + k]
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn n_masked(&self) -> usize {
        self.visible.iter().filter(|&&v| !v).count()
    }

    pub fn n_visible(&self) -> usize {
        self.visible.len() - self.n_masked()
    }

    /// Flat indices of visible tokens in ascending order.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| !self.visible[i]).collect()
    }

    /// The binary matrix B, 0 = masked, 1 = visible.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        self.visible
            .chunks(self.n_patches.max(1))
            .map(|r| r.iter().map(|&v| v as u8).collect())
            .collect()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Temporal radius in patches for a stride of `stride_s` seconds.
pub fn temporal_radius(r_t: f64, stride_s: f64) -> usize {
    (r_t / stride_s).round() as usize
}

/// Seed-and-grow block masking followed by uniform trimming to the exact
/// target. Seeds are drawn among still-visible tokens; every seed masks at
/// least itself, so the loop terminates.
pub fn block_mask(positions: &[[f64; 3]], p: usize, params: &MaskParams, stride_s: f64, seed: u64) -> Result<Mask> {
    params.validate()?;
    let c = positions.len();
    if c * p == 0 {
        return Err(invalid("cannot mask an empty token grid"));
    }
    if !(stride_s > 0.0) {
        return Err(invalid(format!("stride {stride_s} s must be positive")));
    }
    let n = c * p;
    let target = mask_target(n, params.m_r);
    let rt = temporal_radius(params.r_t, stride_s);
    let near = |radius: f64| -> Vec<Vec<usize>> {
        (0..c)
            .map(|i| (0..c).filter(|&j| dist(&positions[i], &positions[j]) <= radius).collect())
            .collect()
    };
    let near_s = near(params.r_s);
    let near_d = near(params.r_d);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visible = vec![true; n];
    let mut masked = 0usize;
    while masked < target {
        let mut pick = rng.random_range(0..n - masked);
        let mut s = 0;
        for (i, &v) in visible.iter().enumerate() {
            if v {
                if pick == 0 {
                    s = i;
                    break;
                }
                pick -= 1;
            }
        }
        let (ch, tau) = (s / p, s % p);
        let drop = rng.random::<f64>() < params.d_r;
        let (chans, lo, hi) = if drop {
            (&near_d[ch], 0, p - 1)
        } else {
            (&near_s[ch], tau.saturating_sub(rt), (tau + rt).min(p - 1))
        };
        for &j in chans {
            for k in lo..=hi {
                let idx = j * p + k;
                if visible[idx] {
                    visible[idx] = false;
                    masked += 1;
                }
            }
        }
    }
    if masked > target {
        let masked_idx: Vec<usize> = (0..n).filter(|&i| !visible[i]).collect();
        for i in sample(&mut rng, masked_idx.len(), masked - target) {
            visible[masked_idx[i]] = true;
        }
    }
    Ok(Mask {
        visible,
        n_channels: c,
        n_patches: p,
    })
}

/// Uniformly random subset of exactly round(m_r·C·p) masked tokens.
pub fn random_mask(c: usize, p: usize, m_r: f64, seed: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&m_r) {
        return Err(invalid(format!("mask ratio {m_r} must be in [0, 1]")));
    }
    let n = c * p;
    let mut visible = vec![true; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, mask_target(n, m_r)) {
        visible[i] = false;
    }
    Ok(Mask {
        visible,
        n_channels: c,
        n_patches: p,
    })
}

/// Dispatches on `params.mode`.
pub fn make_mask(positions: &[[f64; 3]], p: usize, params: &MaskParams, stride_s: f64, seed: u64) -> Result<Mask> {
    match params.mode {
        MaskMode::Block => block_mask(positions, p, params, stride_s, seed),
        MaskMode::Random => {
            params.validate()?;
            random_mask(positions.len(), p, params.m_r, seed)
        }
    }
}

/// Visible rows of a token matrix plus the index maps needed to put them back.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition<F> {
    pub visible: Tensor<F>,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

pub fn partition<F: Real>(tokens: &Tensor<F>, mask: &Mask) -> Result<Partition<F>> {
    if tokens.rows() != mask.visible.len() {
        return Err(Error::Shape(format!(
            "{} token rows for a {}x{} mask",
            tokens.rows(),
            mask.n_channels,
            mask.n_patches
        )));
    }
    let visible_idx = mask.visible_indices();
    Ok(Partition {
        visible: tokens.gather_rows(&visible_idx),
        visible_idx,
        masked_idx: mask.masked_indices(),
    })
}

/// Inverse of `partition`: scatter `visible` and `masked` rows back into
/// channel-major order.
pub fn reassemble<F: Real>(part: &Partition<F>, masked: &Tensor<F>) -> Result<Tensor<F>> {
    let d = part.visible.cols();
    if masked.rows() != part.masked_idx.len() || (masked.rows() > 0 && masked.cols() != d) {
        return Err(Error::Shape(format!("masked rows {:?}", masked.shape())));
    }
    let n = part.visible_idx.len() + part.masked_idx.len();
    let mut out = Tensor::zeros(n, d);
    for (r, &i) in part.visible_idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(part.visible.row(r));
    }
    for (r, &i) in part.masked_idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(masked.row(r));
    }
    Ok(out)
}

/// Mean over masked tokens of the distance to the nearest other masked
/// token, with time converted at `cm_per_s`. `None` with fewer than two
/// masked tokens.
pub fn nearest_masked_distance(mask: &Mask, positions: &[[f64; 3]], stride_s: f64, cm_per_s: f64) -> Option<f64> {
    let p = mask.n_patches;
    let pts: Vec<(usize, usize)> = mask.masked_indices().iter().map(|&i| (i / p, i % p)).collect();
    if pts.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    for (a, &(ca, ka)) in pts.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (b, &(cb, kb)) in pts.iter().enumerate() {
            if a == b {
                continue;
            }
            let dt = (ka as f64 - kb as f64) * stride_s * cm_per_s;
            let ds = dist(&positions[ca], &positions[cb]);
            best = best.min((ds * ds + dt * dt).sqrt());
        }
        total += best;
    }
    Some(total / pts.len() as f64)
}
