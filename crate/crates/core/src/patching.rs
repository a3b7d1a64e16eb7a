//! Overlapping per-channel windows.

use serde::{Deserialize, Serialize};

use crate::eeg_data::EegRecording;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    /// Window length in samples.
    pub w: usize,
    /// Overlap between consecutive windows in samples.
    pub o: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { w: 200, o: 20 }
    }
}

impl PatchConfig {
    pub fn stride(&self) -> usize {
        self.w - self.o
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.w == 0 {
            v.push("patch.w must be >= 1".into());
        }
        if self.o >= self.w {
            v.push(format!("patch.o ({}) must be below patch.w ({})", self.o, self.w));
        }
        v
    }
}

/// Number of complete windows of length `w` with overlap `o` in `t` samples.
///
/// The ceiling-plus-indicator expression sometimes quoted for this count
/// gives 12 windows for 10 s at 200 Hz with w = 200, o = 20, yet only 11
/// complete windows fit (start offsets 0, 180, ..., 1800). The floor form
/// counts complete windows exactly.
pub fn patch_count(t: usize, w: usize, o: usize) -> Result<usize> {
    if w == 0 || o >= w {
        return Err(invalid(format!("invalid window w={w}, o={o}")));
    }
    if t < w {
        return Err(invalid(format!("signal of {t} samples is shorter than one {w}-sample window")));
    }
    Ok((t - w) / (w - o) + 1)
}

/// C×p×w windows, flattened as `patches[(c * p + k) * w + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patches: Vec<f32>,
    pub n_channels: usize,
    pub n_patches: usize,
    pub config: PatchConfig,
    pub source_len: usize,
}

impl PatchGrid {
    pub fn window(&self, c: usize, k: usize) -> &[f32] {
        let w = self.config.w;
        let start = (c * self.n_patches + k) * w;
        &self.patches[start..start + w]
    }

    pub fn data(&self) -> &[f32] {
        &self.patches
    }

    pub fn n_tokens(&self) -> usize {
        self.n_channels * self.n_patches
    }

    /// Inverse of `segment` on the covered prefix: every sample is the mean
    /// of the windows that contain it. Returns C rows of
    /// `(p - 1) * stride + w` samples.
    pub fn overlap_average(&self) -> Vec<Vec<f32>> {
        let (w, s) = (self.config.w, self.config.stride());
        let len = (self.n_patches - 1) * s + w;
        (0..self.n_channels)
            .map(|c| {
                let mut sum = vec![0.0f64; len];
                let mut cnt = vec![0u32; len];
                for k in 0..self.n_patches {
                    for (j, &v) in self.window(c, k).iter().enumerate() {
                        sum[k * s + j] += v as f64;
                        cnt[k * s + j] += 1;
                    }
                }
                sum.iter().zip(&cnt).map(|(&a, &n)| (a / n as f64) as f32).collect()
            })
            .collect()
    }
}

/// Cuts every channel into complete windows; the trailing incomplete window
/// is discarded.
pub fn segment(rec: &EegRecording, cfg: &PatchConfig) -> Result<PatchGrid> {
    let t = rec.n_samples();
    let p = patch_count(t, cfg.w, cfg.o)?;
    let s = cfg.stride();
    let mut patches = Vec::with_capacity(rec.n_channels() * p * cfg.w);
    for c in 0..rec.n_channels() {
        let x = rec.channel(c);
        for k in 0..p {
            patches.extend_from_slice(&x[k * s..k * s + cfg.w]);
        }
    }
    Ok(PatchGrid {
        patches,
        n_channels: rec.n_channels(),
        n_patches: p,
        config: *cfg,
        source_len: t,
    })
}
