//! Reverse-mode gradient of a small expression compared with central differences.
//!
//! Run with `cargo run -p ulrseg-tensor --example autodiff`.

use ulrseg_tensor::gradcheck::{central_differences, relative_error};
use ulrseg_tensor::{Tensor, Var};

fn f(x: &Var, w: &Var) -> Var {
    x.mul(w).relu().mul(x).sum()
}

fn main() {
    let x0 = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 1.5]);
    let w = Var::constant(Tensor::new(&[4], vec![1.0, 2.0, -0.5, 0.25]));
    let x = Var::leaf(x0.clone());
    let y = f(&x, &w);
    let analytic = y.backward().get(&x).expect("x is a leaf").clone();
    let numeric = central_differences(
        |t| f(&Var::constant(t.clone()), &w).item(),
        &x0,
        &[0, 1, 2, 3],
        1e-6,
    );
    println!("f(x) = {:.4}", y.item());
    for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
        println!(
            "df/dx[{i}]: analytic {a:+.6}, numeric {n:+.6}, rel err {:.1e}",
            relative_error(*a, *n, 1e-8)
        );
    }
}
