#![allow(dead_code)]

pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ulrseg_tensor::gradcheck::{central_differences, relative_error, spread_indices};
use ulrseg_tensor::{Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Analytic gradient of `f` at `x` against central differences on up to
/// `samples` spread indices; returns the worst relative error.
pub fn worst_grad_error(f: impl Fn(&Var) -> Var, x: &Tensor, samples: usize) -> f64 {
    let leaf = Var::leaf(x.clone());
    let grads = f(&leaf).backward();
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let idx = spread_indices(x.len(), samples);
    let numeric = central_differences(|t| f(&Var::constant(t.clone())).item(), x, &idx, FD_STEP);
    idx.iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic.data()[i], n, FD_FLOOR))
        .fold(0.0, f64::max)
}

pub fn assert_grad_close(f: impl Fn(&Var) -> Var, x: &Tensor, samples: usize, tol: f64) {
    let err = worst_grad_error(f, x, samples);
    assert!(
        err < tol,
        "worst relative gradient error {err:e} exceeds {tol:e}"
    );
}
