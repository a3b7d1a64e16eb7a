//! Signal container, preprocessing pipeline, synthetic generator and the
//! on-disk corpus format.

mod corpus;
mod filter;
mod normalize;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use corpus::{read_corpus, read_recording, write_corpus, write_recording, RecordingMeta};
pub use filter::{bandpass, resample};
pub use normalize::{clip_sigma, validate_duration, zscore_session};
pub use synth::{synth_generate, Peak, SynthSpec};

/// Multi-channel signal, channel-major (`data[c * T + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    data: Vec<f32>,
    n_channels: usize,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
    pub session_id: String,
    pub subject_id: String,
    /// Electrode coordinates in cm, one row per channel, when known.
    pub positions: Option<Vec<[f64; 3]>>,
    pub label: Option<usize>,
}

impl EegRecording {
    pub fn new(
        data: Vec<f32>,
        n_channels: usize,
        sample_rate: f64,
        channel_names: Vec<String>,
        session_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if n_channels == 0 {
            return Err(invalid("recording needs at least one channel"));
        }
        if data.is_empty() || data.len() % n_channels != 0 {
            return Err(invalid(format!(
                "data length {} is not a positive multiple of {n_channels} channels",
                data.len()
            )));
        }
        if channel_names.len() != n_channels {
            return Err(invalid(format!(
                "{} channel names for {n_channels} channels",
                channel_names.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(invalid(format!("sample rate {sample_rate} must be positive")));
        }
        Ok(Self {
            data,
            n_channels,
            sample_rate,
            channel_names,
            session_id: session_id.into(),
            subject_id: subject_id.into(),
            positions: None,
            label: None,
        })
    }

    pub fn from_channels(
        channels: &[Vec<f32>],
        sample_rate: f64,
        channel_names: Vec<String>,
        session_id: impl Into<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let t = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != t) {
            return Err(invalid("channels have different lengths"));
        }
        let data = channels.concat();
        Self::new(data, channels.len(), sample_rate, channel_names, session_id, subject_id)
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.n_channels {
            return Err(invalid(format!(
                "{} positions for {} channels",
                positions.len(),
                self.n_channels
            )));
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.data.len() / self.n_channels
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.n_samples();
        &self.data[c * t..(c + 1) * t]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let t = self.n_samples();
        &mut self.data[c * t..(c + 1) * t]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "recording {} contains NaN or Inf",
                self.session_id
            )))
        }
    }

    /// Same metadata, new samples (possibly a different length and rate).
    pub(crate) fn replace_data(&self, data: Vec<f32>, sample_rate: f64) -> Self {
        debug_assert_eq!(data.len() % self.n_channels, 0);
        Self {
            data,
            n_channels: self.n_channels,
            sample_rate,
            channel_names: self.channel_names.clone(),
            session_id: self.session_id.clone(),
            subject_id: self.subject_id.clone(),
            positions: self.positions.clone(),
            label: self.label,
        }
    }

    /// Keeps only the listed channels, in the listed order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(invalid("channel selection is empty"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_channels) {
            return Err(invalid(format!("channel index {bad} out of range")));
        }
        let data: Vec<f32> = idx.iter().flat_map(|&i| self.channel(i).iter().copied()).collect();
        Ok(Self {
            data,
            n_channels: idx.len(),
            sample_rate: self.sample_rate,
            channel_names: idx.iter().map(|&i| self.channel_names[i].clone()).collect(),
            session_id: self.session_id.clone(),
            subject_id: self.subject_id.clone(),
            positions: self
                .positions
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
            label: self.label,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub clip_sigma: f64,
    pub min_duration: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 200.0,
            band_low: 0.5,
            band_high: 99.5,
            clip_sigma: 15.0,
            min_duration: 10.0,
        }
    }
}

impl PreprocessConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.target_rate > 0.0) {
            v.push(format!("preprocess.target_rate must be > 0 (got {})", self.target_rate));
        }
        if !(self.band_low > 0.0) {
            v.push(format!("preprocess.band_low must be > 0 (got {})", self.band_low));
        }
        if !(self.band_low < self.band_high) {
            v.push(format!(
                "preprocess.band_low ({}) must be below band_high ({})",
                self.band_low, self.band_high
            ));
        }
        if !(self.band_high < self.target_rate / 2.0) {
            v.push(format!(
                "preprocess.band_high ({}) must be below Nyquist ({})",
                self.band_high,
                self.target_rate / 2.0
            ));
        }
        if !(self.clip_sigma > 0.0) {
            v.push(format!("preprocess.clip_sigma must be > 0 (got {})", self.clip_sigma));
        }
        if !(self.min_duration >= 0.0) {
            v.push(format!("preprocess.min_duration must be >= 0 (got {})", self.min_duration));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug)]
pub struct PreprocessOutput {
    pub kept: Vec<EegRecording>,
    /// Session ids of recordings dropped by the duration filter.
    pub rejected: Vec<String>,
}

/// Duration filter → resample → band-pass → session z-score → clip.
///
/// Z-score statistics are pooled over every kept recording that shares a
/// `session_id`. Output order follows input order.
pub fn preprocess(recs: Vec<EegRecording>, cfg: &PreprocessConfig) -> Result<PreprocessOutput> {
    cfg.validate()?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for rec in recs {
        rec.ensure_finite()?;
        if !validate_duration(&rec, cfg.min_duration) {
            rejected.push(rec.session_id.clone());
            continue;
        }
        let r = resample(&rec, cfg.target_rate)?;
        kept.push(bandpass(&r, cfg.band_low, cfg.band_high)?);
    }

    let mut sessions: Vec<String> = Vec::new();
    for r in &kept {
        if !sessions.contains(&r.session_id) {
            sessions.push(r.session_id.clone());
        }
    }
    let mut slots: Vec<Option<EegRecording>> = kept.into_iter().map(Some).collect();
    for s in sessions {
        let idx: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, r)| r.as_ref().is_some_and(|r| r.session_id == s))
            .map(|(i, _)| i)
            .collect();
        let group: Vec<EegRecording> = idx.iter().map(|&i| slots[i].take().unwrap()).collect();
        let normed = zscore_session(&group)?;
        for (i, r) in idx.into_iter().zip(normed) {
            slots[i] = Some(clip_sigma(&r, cfg.clip_sigma)?);
        }
    }
    let kept: Vec<EegRecording> = slots.into_iter().map(Option::unwrap).collect();
    for r in &kept {
        r.ensure_finite()?;
    }
    Ok(PreprocessOutput { kept, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: f64, secs: f64, amp: f64) -> Vec<f32> {
        let n = (rate * secs).round() as usize;
        (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate).sin()) as f32)
            .collect()
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(EegRecording::new(vec![], 1, 200.0, vec!["Cz".into()], "s", "p").is_err());
        assert!(EegRecording::new(vec![0.0; 3], 2, 200.0, vec!["a".into(), "b".into()], "s", "p").is_err());
        assert!(EegRecording::new(vec![0.0; 4], 2, 200.0, vec!["a".into()], "s", "p").is_err());
    }

    #[test]
    fn config_lists_every_violation() {
        let cfg = PreprocessConfig {
            target_rate: 200.0,
            band_low: 50.0,
            band_high: 40.0,
            clip_sigma: -1.0,
            min_duration: 10.0,
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn pipeline_drops_short_and_bounds_output() {
        let long = EegRecording::from_channels(
            &[sine(10.0, 256.0, 12.0, 50.0), sine(7.0, 256.0, 12.0, 5.0)],
            256.0,
            vec!["C3".into(), "C4".into()],
            "sess",
            "sub",
        )
        .unwrap();
        let short = EegRecording::from_channels(
            &[sine(10.0, 256.0, 5.0, 50.0)],
            256.0,
            vec!["Cz".into()],
            "short",
            "sub",
        )
        .unwrap();
        let out = preprocess(vec![long, short], &PreprocessConfig::default()).unwrap();
        assert_eq!(out.rejected, vec!["short".to_string()]);
        assert_eq!(out.kept.len(), 1);
        let r = &out.kept[0];
        assert_eq!(r.sample_rate, 200.0);
        assert_eq!(r.n_samples(), 2400);
        assert!(r.data().iter().all(|v| v.abs() <= 15.0 && v.is_finite()));
    }
}
