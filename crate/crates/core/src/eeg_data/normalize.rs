use std::collections::HashMap;

use super::EegRecording;
use crate::error::{invalid, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    min: f64,
    max: f64,
}

/// Per-channel z-score with mean and standard deviation pooled over every
/// sample of every recording passed in. Channels are matched by name, so the
/// result does not depend on channel order. A channel that is constant over
/// the whole session maps to zeros.
pub fn zscore_session(recs: &[EegRecording]) -> Result<Vec<EegRecording>> {
    if recs.is_empty() {
        return Err(invalid("z-score needs at least one recording"));
    }
    let mut stats: HashMap<&str, Moments> = HashMap::new();
    for r in recs {
        for (c, name) in r.channel_names.iter().enumerate() {
            let m = stats.entry(name.as_str()).or_insert(Moments {
                n: 0,
                sum: 0.0,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            });
            for &v in r.channel(c) {
                let v = v as f64;
                m.n += 1;
                m.sum += v;
                m.min = m.min.min(v);
                m.max = m.max.max(v);
            }
        }
    }
    let means: HashMap<&str, f64> = stats.iter().map(|(k, m)| (*k, m.sum / m.n as f64)).collect();
    let mut sq: HashMap<&str, f64> = HashMap::new();
    for r in recs {
        for (c, name) in r.channel_names.iter().enumerate() {
            let mu = means[name.as_str()];
            let acc = sq.entry(name.as_str()).or_insert(0.0);
            for &v in r.channel(c) {
                let d = v as f64 - mu;
                *acc += d * d;
            }
        }
    }

    let mut out = Vec::with_capacity(recs.len());
    for r in recs {
        let mut data = Vec::with_capacity(r.data().len());
        for (c, name) in r.channel_names.iter().enumerate() {
            let m = &stats[name.as_str()];
            let constant = m.min == m.max;
            let mu = means[name.as_str()];
            let std = (sq[name.as_str()] / m.n as f64).sqrt().max(STD_FLOOR);
            data.extend(r.channel(c).iter().map(|&v| {
                if constant {
                    0.0
                } else {
                    ((v as f64 - mu) / std) as f32
                }
            }));
        }
        out.push(r.replace_data(data, r.sample_rate));
    }
    Ok(out)
}

/// Saturates every value to `[-k, k]`.
pub fn clip_sigma(rec: &EegRecording, k: f64) -> Result<EegRecording> {
    if !(k > 0.0) {
        return Err(invalid(format!("clip threshold {k} must be positive")));
    }
    let k = k as f32;
    let data = rec.data().iter().map(|&v| v.clamp(-k, k)).collect();
    Ok(rec.replace_data(data, rec.sample_rate))
}

/// `true` when the recording lasts at least `min_s` seconds.
pub fn validate_duration(rec: &EegRecording, min_s: f64) -> bool {
    rec.n_samples() as f64 / rec.sample_rate >= min_s
}
