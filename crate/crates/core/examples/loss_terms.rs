//! Evaluates each objective term on small tensors and combines them with the default weights.
//!
//! Run with `cargo run --example loss_terms`.

use ulrseg::afe::{feature_loss_parts, FeatureExtractor, StubExtractor};
use ulrseg::losses::{adv_loss, bce, cross_entropy, disc_loss, total_loss, LossParts, LossWeights};
use ulrseg::ImageTensor;
use ulrseg_tensor::Tensor;

fn main() -> ulrseg::Result<()> {
    println!("bce(logit 0, target 1) = {:.6}", bce(0.0, 1.0));
    let (real, fake) = ([2.0, 1.5], [-1.0, 0.5]);
    println!("discriminator loss     = {:.6}", disc_loss(&real, &fake));
    println!("adversarial loss       = {:.6}", adv_loss(&fake));

    let logits = Tensor::new(&[1, 3, 1, 2], vec![2.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
    println!(
        "cross-entropy          = {:.6}",
        cross_entropy(&logits, &[0, 255], 255)?
    );

    // Feature-space distance between a gradient image and its inverse.
    let fx = StubExtractor::new(8, 4, 1)?;
    let a = ImageTensor::from_fn(3, 16, 16, |_, y, x| (y + x) as f64 / 30.0);
    let b = ImageTensor::from_fn(3, 16, 16, |c, y, x| 1.0 - a.at(c, y, x));
    let parts = feature_loss_parts(&fx.extract(&a)?, &fx.extract(&b)?)?;
    println!(
        "feature loss           = {:.6} (l1 {:.6}, cos {:.6})",
        parts.total(),
        parts.l1,
        parts.cos
    );

    let w = LossWeights::default();
    let ln2 = std::f64::consts::LN_2;
    let t = total_loss(
        &LossParts {
            l2: 1.0,
            fea: 0.0,
            adv: ln2,
            ce: ln2,
        },
        &w,
    );
    println!("total with {w:?} = {t:.6}");
    Ok(())
}
