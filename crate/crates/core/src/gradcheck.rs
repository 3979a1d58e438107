//! Central finite-difference gradient checks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Parameterized;

/// Compares `grads` with central differences (h = 1e-5) of `loss` at
/// `samples` random parameter coordinates. Returns the worst relative error
/// `|numeric - analytic| / max(|numeric|, |analytic|, 1e-6)`.
pub fn max_fd_error<M, F>(model: &M, grads: &M, loss: F, samples: usize, seed: u64) -> f64
where
    M: Parameterized + Clone,
    F: Fn(&M) -> f64,
{
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grad_list: Vec<Array2<f64>> = grads
        .params()
        .into_iter()
        .map(|(_, _, g)| g.clone())
        .collect();
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|(_, _, p)| p.dim()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let which = rng.random_range(0..shapes.len());
        let (r, c) = shapes[which];
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let mut plus = model.clone();
        plus.params_mut()[which].2[[i, j]] += h;
        let mut minus = model.clone();
        minus.params_mut()[which].2[[i, j]] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grad_list[which][[i, j]];
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
