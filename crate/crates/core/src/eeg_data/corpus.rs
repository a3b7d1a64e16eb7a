//! On-disk corpus: per recording a UTF-8 JSON metadata file plus a raw
//! payload of C×T little-endian `f32`, channel-major. A `corpus.json` index
//! lists the recording stems in order. See `docs/formats.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EegRecording;
use crate::error::{invalid, Error, Result};

pub const RECORDING_FORMAT: &str = "eegfm-recording";
pub const CORPUS_FORMAT: &str = "eegfm-corpus";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingMeta {
    pub format: String,
    pub version: u32,
    pub channel_names: Vec<String>,
    pub sample_rate: f64,
    pub n_samples: usize,
    pub session_id: String,
    pub subject_id: String,
    pub positions_cm: Option<Vec<[f64; 3]>>,
    pub label: Option<usize>,
    /// Payload file name, relative to the metadata file.
    pub payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusIndex {
    format: String,
    version: u32,
    recordings: Vec<String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json` and `<stem>.f32` into `dir`.
pub fn write_recording(dir: &Path, stem: &str, rec: &EegRecording) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let payload = format!("{stem}.f32");
    let meta = RecordingMeta {
        format: RECORDING_FORMAT.into(),
        version: FORMAT_VERSION,
        channel_names: rec.channel_names.clone(),
        sample_rate: rec.sample_rate,
        n_samples: rec.n_samples(),
        session_id: rec.session_id.clone(),
        subject_id: rec.subject_id.clone(),
        positions_cm: rec.positions.clone(),
        label: rec.label,
        payload: payload.clone(),
    };
    let mut bytes = Vec::with_capacity(rec.data().len() * 4);
    for v in rec.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(&dir.join(&payload), &bytes)?;
    let json = serde_json::to_string_pretty(&meta)?;
    write_bytes(&dir.join(format!("{stem}.json")), json.as_bytes())
}

pub fn read_recording(meta_path: &Path) -> Result<EegRecording> {
    let text = read_bytes(meta_path)?;
    let meta: RecordingMeta = serde_json::from_slice(&text)?;
    if meta.format != RECORDING_FORMAT || meta.version != FORMAT_VERSION {
        return Err(invalid(format!(
            "{}: unsupported recording format {} v{}",
            meta_path.display(),
            meta.format,
            meta.version
        )));
    }
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let bytes = read_bytes(&dir.join(&meta.payload))?;
    let c = meta.channel_names.len();
    if bytes.len() != c * meta.n_samples * 4 {
        return Err(invalid(format!(
            "{}: payload has {} bytes, expected {}",
            meta.payload,
            bytes.len(),
            c * meta.n_samples * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut rec = EegRecording::new(
        data,
        c,
        meta.sample_rate,
        meta.channel_names,
        meta.session_id,
        meta.subject_id,
    )?;
    if let Some(p) = meta.positions_cm {
        rec = rec.with_positions(p)?;
    }
    rec.label = meta.label;
    Ok(rec)
}

pub fn write_corpus(dir: &Path, recs: &[EegRecording]) -> Result<()> {
    let mut stems = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        let stem = format!("rec_{i:06}");
        write_recording(dir, &stem, r)?;
        stems.push(stem);
    }
    let index = CorpusIndex {
        format: CORPUS_FORMAT.into(),
        version: FORMAT_VERSION,
        recordings: stems,
    };
    let json = serde_json::to_string_pretty(&index)?;
    write_bytes(&dir.join("corpus.json"), json.as_bytes())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<EegRecording>> {
    let text = read_bytes(&dir.join("corpus.json"))?;
    let index: CorpusIndex = serde_json::from_slice(&text)?;
    if index.format != CORPUS_FORMAT || index.version != FORMAT_VERSION {
        return Err(invalid(format!(
            "unsupported corpus format {} v{}",
            index.format, index.version
        )));
    }
    index
        .recordings
        .iter()
        .map(|stem| read_recording(&dir.join(format!("{stem}.json"))))
        .collect()
}
