//! Power-iteration spectral normalization checked against an exact SVD.
//!
//! Run with `cargo run --example spectral_norm`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ulrseg::sad::{matrix_dims, spectral_normalize, SpectralState};
use ulrseg_tensor::Tensor;

fn sigma(t: &Tensor) -> f64 {
    let (r, c) = matrix_dims(t);
    DMatrix::from_row_slice(r, c, t.data())
        .singular_values()
        .max()
}

fn main() -> ulrseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = Tensor::randn(&[16, 8, 3, 3], 1.0, &mut rng);
    let (r, c) = matrix_dims(&w);
    println!("conv weight viewed as {r}×{c}, σ = {:.4}", sigma(&w));
    let mut state = SpectralState::new(r, c, 8, &mut rng);
    for round in 1..=4 {
        let out = spectral_normalize(&w, &mut state, 1)?;
        println!(
            "after {round} persistent iteration(s): σ = {:.6}",
            sigma(&out)
        );
    }
    Ok(())
}
