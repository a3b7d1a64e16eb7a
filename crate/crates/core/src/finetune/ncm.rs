//! Few-shot evaluation with a nearest-class-mean classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{balanced_accuracy, confusion, mean_std};
use crate::error::{invalid, Result};
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcmSummary {
    pub n_shots: usize,
    pub mean: f64,
    pub std: f64,
    pub per_run: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

/// Per run: `n_shots` random support samples per class, every other sample
/// classified by the nearest support centroid; balanced accuracy per run.
pub fn ncm_few_shot(embeddings: &[Vec<f32>], labels: &[usize], n_shots: usize, n_runs: usize, seed: u64) -> Result<NcmSummary> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(invalid(format!("{} embeddings vs {} labels", embeddings.len(), labels.len())));
    }
    if n_shots == 0 || n_runs == 0 {
        return Err(invalid("n_shots and n_runs must be >= 1"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(invalid("embeddings have different widths"));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let by_class: Vec<Vec<usize>> = (0..n_classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let present: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(invalid("few-shot evaluation needs at least two classes"));
    }
    for &c in &present {
        if by_class[c].len() <= n_shots {
            return Err(invalid(format!(
                "class {c} has {} samples; {n_shots} shots leave none to evaluate",
                by_class[c].len()
            )));
        }
    }
    let mut per_run = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[run as u64]));
        let mut support = vec![false; labels.len()];
        let mut centroids = Vec::with_capacity(present.len());
        for &c in &present {
            let mut idx = by_class[c].clone();
            idx.shuffle(&mut rng);
            let mut mean = vec![0.0f64; d];
            for &i in &idx[..n_shots] {
                support[i] = true;
                for (m, &v) in mean.iter_mut().zip(&embeddings[i]) {
                    *m += v as f64 / n_shots as f64;
                }
            }
            centroids.push((c, mean));
        }
        let (mut t, mut p) = (Vec::new(), Vec::new());
        for i in (0..labels.len()).filter(|&i| !support[i]) {
            let best = centroids
                .iter()
                .min_by(|a, b| sq_dist(&embeddings[i], &a.1).total_cmp(&sq_dist(&embeddings[i], &b.1)))
                .unwrap();
            t.push(labels[i]);
            p.push(best.0);
        }
        per_run.push(balanced_accuracy(&confusion(&t, &p, n_classes)?)?);
    }
    let s = mean_std(&per_run).expect("n_runs >= 1");
    Ok(NcmSummary {
        n_shots,
        mean: s.mean,
        std: s.std,
        per_run,
    })
}
