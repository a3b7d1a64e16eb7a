//! Evaluation on a subset of the recorded electrodes.

use super::metrics::MetricReport;
use super::probe::{evaluate_samples, SampleClassifier};
use crate::eeg_data::EegRecording;
use crate::error::{invalid, Error, Result};
use crate::patching::PatchConfig;
use crate::pretrain::Sample;

/// Keeps only the named channels (case-insensitive) of `rec`, with their
/// original positions.
pub fn keep_channels<S: AsRef<str>>(rec: &EegRecording, keep: &[S]) -> Result<EegRecording> {
    if keep.is_empty() {
        return Err(invalid("channel subset is empty"));
    }
    let mut idx = Vec::with_capacity(keep.len());
    let mut missing = Vec::new();
    for k in keep {
        match rec
            .channel_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(k.as_ref()))
        {
            Some(i) => idx.push(i),
            None => missing.push(k.as_ref().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnresolvedChannels(missing));
    }
    rec.select_channels(&idx)
}

/// Metrics of `model` when each recording is reduced to `keep`.
pub fn channel_subset_eval<S: AsRef<str>>(
    model: &dyn SampleClassifier,
    recs: &[EegRecording],
    keep: &[S],
    patch: &PatchConfig,
) -> Result<MetricReport> {
    let samples = recs
        .iter()
        .map(|r| Sample::from_recording(&keep_channels(r, keep)?, patch))
        .collect::<Result<Vec<_>>>()?;
    evaluate_samples(model, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_selection() {
        let rec = EegRecording::new(
            (0..30).map(|v| v as f32).collect(),
            3,
            10.0,
            vec!["Fz".into(), "Cz".into(), "Pz".into()],
            "s",
            "u",
        )
        .unwrap()
        .with_positions(vec![[0.0, 1.0, 2.0], [0.0, 0.0, 9.0], [0.0, -1.0, 2.0]])
        .unwrap();
        let sub = keep_channels(&rec, &["pz", "FZ"]).unwrap();
        assert_eq!(sub.channel_names, vec!["Pz", "Fz"]);
        assert_eq!(sub.positions.as_ref().unwrap()[0], [0.0, -1.0, 2.0]);
        assert_eq!(sub.channel(1)[0], 0.0);
        assert!(keep_channels::<&str>(&rec, &[]).is_err());
        assert!(matches!(keep_channels(&rec, &["Oz"]), Err(Error::UnresolvedChannels(_))));
    }
}
