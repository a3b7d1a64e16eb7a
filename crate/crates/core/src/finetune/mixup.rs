//! Mixup: convex combinations of batch elements and their labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed<F> {
    pub xs: Vec<Tensor<F>>,
    pub ys: Vec<Vec<f64>>,
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// `x̃_i = λ·x_i + (1−λ)·x_perm(i)` and the same for labels.
pub fn mix_with<F: Real>(xs: &[Tensor<F>], ys: &[Vec<f64>], lambda: f64, perm: &[usize]) -> Result<Mixed<F>> {
    let n = xs.len();
    if ys.len() != n || perm.len() != n {
        return Err(invalid(format!("{n} inputs, {} labels, {} permutation entries", ys.len(), perm.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let mut seen = vec![false; n];
    for &j in perm {
        if j >= n || std::mem::replace(&mut seen[j], true) {
            return Err(invalid("perm is not a permutation"));
        }
    }
    let l = F::of(lambda);
    let r = F::of(1.0 - lambda);
    let mut out_x = Vec::with_capacity(n);
    let mut out_y = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (&xs[i], &xs[perm[i]]);
        if a.shape() != b.shape() || ys[i].len() != ys[perm[i]].len() {
            return Err(Error::Shape(format!("cannot mix {:?} with {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&u, &v)| l * u + r * v).collect();
        out_x.push(Tensor::from_vec(a.rows(), a.cols(), data));
        out_y.push(ys[i].iter().zip(&ys[perm[i]]).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect());
    }
    Ok(Mixed {
        xs: out_x,
        ys: out_y,
        lambda,
        perm: perm.to_vec(),
    })
}

/// Draws λ ~ Beta(alpha, alpha) and a uniform permutation of the batch.
pub fn mixup_batch<F: Real>(xs: &[Tensor<F>], ys: &[Vec<f64>], alpha: f64, seed: u64) -> Result<Mixed<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = draw_lambda(alpha, &mut rng)?;
    let mut perm: Vec<usize> = (0..xs.len()).collect();
    perm.shuffle(&mut rng);
    mix_with(xs, ys, lambda, &perm)
}

pub fn draw_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("mixup alpha {alpha} must be > 0")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))?;
    Ok(beta.sample(rng))
}
