//! Euclidean Alignment: per-subject whitening by the inverse square root
//! of the mean trial covariance.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::eeg_data::EegRecording;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const RIDGE: f64 = 1e-8;

fn to_matrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_vec(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec())
}

/// R̄^(−1/2) for R̄ = mean of X·Xᵀ/T over the trials, plus `RIDGE`·I.
pub fn alignment_matrix(trials: &[Tensor<f64>]) -> Result<DMatrix<f64>> {
    let first = trials.first().ok_or_else(|| invalid("alignment needs at least one trial"))?;
    let c = first.rows();
    let mut r = DMatrix::<f64>::zeros(c, c);
    for t in trials {
        if t.rows() != c || t.cols() == 0 {
            return Err(Error::Shape(format!("trial {:?} in a {c}-channel group", t.shape())));
        }
        let x = to_matrix(t);
        r += (&x * x.transpose()) / t.cols() as f64;
    }
    r /= trials.len() as f64;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trial covariance".into()));
    }
    r += DMatrix::<f64>::identity(c, c) * RIDGE;
    let eig = SymmetricEigen::new(r);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0 && min.is_finite()) {
        return Err(Error::NonFinite(format!("mean covariance is singular (smallest eigenvalue {min:e})")));
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

/// Aligns every subject's trials (each C×T) with that subject's own matrix.
pub fn euclidean_alignment(subjects: &[Vec<Tensor<f64>>]) -> Result<Vec<Vec<Tensor<f64>>>> {
    subjects
        .iter()
        .map(|trials| {
            let m = alignment_matrix(trials)?;
            Ok(trials.iter().map(|t| from_matrix(&(&m * to_matrix(t)))).collect())
        })
        .collect()
}

/// Groups recordings by subject id and aligns each group.
pub fn align_recordings(recs: &[EegRecording]) -> Result<Vec<EegRecording>> {
    let mut subjects: Vec<&str> = Vec::new();
    for r in recs {
        if !subjects.contains(&r.subject_id.as_str()) {
            subjects.push(&r.subject_id);
        }
    }
    let mut out: Vec<Option<EegRecording>> = vec![None; recs.len()];
    for s in subjects {
        let idx: Vec<usize> = (0..recs.len()).filter(|&i| recs[i].subject_id == s).collect();
        let trials: Vec<Tensor<f64>> = idx
            .iter()
            .map(|&i| {
                let r = &recs[i];
                Tensor::from_vec(r.n_channels(), r.n_samples(), r.data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        let m = alignment_matrix(&trials)?;
        for (&i, t) in idx.iter().zip(&trials) {
            let a = from_matrix(&(&m * to_matrix(t)));
            let r = &recs[i];
            let mut aligned = EegRecording::new(
                a.data().iter().map(|&v| v as f32).collect(),
                r.n_channels(),
                r.sample_rate,
                r.channel_names.clone(),
                r.session_id.clone(),
                r.subject_id.clone(),
            )?;
            aligned.positions = r.positions.clone();
            aligned.label = r.label;
            out[i] = Some(aligned);
        }
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trial(c: usize, t: usize, seed: u64, mix: bool) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::from_vec(c, t, (0..c * t).map(|_| StandardNormal.sample(&mut rng)).collect());
        if mix {
            for j in 0..t {
                let a = x.get(0, j);
                for i in 1..c {
                    x.set(i, j, x.get(i, j) + 0.8 * a * i as f64);
                }
            }
        }
        x
    }

    fn covariance(x: &Tensor<f64>) -> Tensor<f64> {
        let mut c = x.matmul_nt(x);
        c.scale_inplace(1.0 / x.cols() as f64);
        c
    }

    #[test]
    fn single_trial_becomes_white() {
        let x = trial(4, 500, 1, true);
        let a = &euclidean_alignment(&[vec![x]]).unwrap()[0][0];
        let cov = covariance(a);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((cov.get(i, j) - e).abs() < 1e-4, "{cov:?}");
            }
        }
    }

    #[test]
    fn whitened_input_is_left_alone() {
        // Build trials whose mean covariance is exactly the identity.
        let raw = trial(3, 400, 2, false);
        let m = alignment_matrix(&[raw.clone()]).unwrap();
        let white = from_matrix(&(&m * to_matrix(&raw)));
        let again = alignment_matrix(&[white]).unwrap();
        let diff = (&again - DMatrix::<f64>::identity(3, 3)).abs().max();
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn scale_cancels() {
        let trials: Vec<Tensor<f64>> = (0..3).map(|s| trial(3, 300, s, true)).collect();
        let scaled: Vec<Tensor<f64>> = trials.iter().map(|t| t.map(|v| 7.5 * v)).collect();
        let a = euclidean_alignment(&[trials]).unwrap();
        let b = euclidean_alignment(&[scaled]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!(x.max_abs_diff(y) < 1e-6);
        }
    }

    #[test]
    fn zero_signal_is_rejected_only_beyond_the_ridge() {
        // The ridge keeps an all-zero group invertible.
        assert!(alignment_matrix(&[Tensor::zeros(2, 10)]).is_ok());
        assert!(alignment_matrix(&[]).is_err());
        assert!(alignment_matrix(&[Tensor::full(2, 10, f64::NAN)]).is_err());
    }
}
