//! Uniform model soup: the elementwise mean of compatible checkpoints.

use crate::error::{invalid, Error, Result};
use crate::model::{Checkpoint, ParamSet};
use crate::tensor::Tensor;

/// Elementwise mean, accumulated in 64-bit and rounded once.
pub fn soup_params(sets: &[&ParamSet<f32>]) -> Result<ParamSet<f32>> {
    let first = *sets.first().ok_or_else(|| invalid("soup needs at least one parameter set"))?;
    let k = sets.len() as f64;
    let mut out = ParamSet::new();
    for p in first.iter() {
        let mut acc = vec![0.0f64; p.value.len()];
        for s in sets {
            let t = s
                .get(&p.name)
                .ok_or_else(|| Error::Manifest(format!("tensor {} missing from one ingredient", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Manifest(format!("tensor {} has shape {:?} vs {:?}", p.name, t.shape(), p.value.shape())));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += v as f64;
            }
        }
        let [r, c] = p.value.shape();
        out.insert(p.name.clone(), p.kind, Tensor::from_vec(r, c, acc.iter().map(|a| (a / k) as f32).collect()))?;
    }
    if sets.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Manifest("ingredients hold different tensor sets".into()));
    }
    Ok(out)
}

/// Averages checkpoints whose manifests agree on config and tensor layout.
/// The result carries the first ingredient's seed and the largest step.
pub fn soup(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints.first().ok_or_else(|| invalid("soup needs at least one checkpoint"))?;
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        first
            .manifest
            .compatible_with(&c.manifest)
            .map_err(|why| Error::Manifest(format!("ingredient {i}: {why}")))?;
    }
    let sets: Vec<&ParamSet<f32>> = checkpoints.iter().map(|c| &c.params).collect();
    let params = soup_params(&sets)?;
    let step = checkpoints.iter().map(|c| c.manifest.step).max().unwrap_or(0);
    let extra = serde_json::json!({ "soup_of": checkpoints.len() });
    Ok(Checkpoint::new(first.manifest.config.clone(), params, first.manifest.seed, step, extra))
}
