//! Scores a hand-made prediction against ground truth with every label and image metric.
//!
//! Run with `cargo run --example segmentation_metrics`.

use ulrseg::metrics::{
    ari, boundary_f, covering, default_bf_tolerance, miou, psnr, ssim, ConfusionMatrix,
};
use ulrseg::{ImageTensor, LabelMap};

fn main() -> ulrseg::Result<()> {
    // Ground truth ignores its top row.
    let gt = LabelMap::from_fn(16, 16, |y, x| {
        if y == 0 {
            255
        } else if x < 8 {
            0
        } else if y < 8 {
            1
        } else {
            2
        }
    });
    // Boundary shifted one column right.
    let pred = LabelMap::from_fn(16, 16, |y, x| {
        if x < 9 {
            0
        } else if y < 8 {
            1
        } else {
            2
        }
    });

    let mut cm = ConfusionMatrix::new(3);
    cm.add(&pred, &gt, 255)?;
    println!("per-class IoU {:?}", cm.class_iou());
    println!("mIoU      {:.4}", miou(&pred, &gt, 3, 255)?);
    println!("ARI       {:.4}", ari(&pred, &gt, 255)?);
    println!("covering  {:.4}", covering(&pred, &gt, 255)?);
    let tol = default_bf_tolerance(16, 16);
    println!("BF@{tol:.2}   {:.4}", boundary_f(&pred, &gt, tol)?);

    let clean = ImageTensor::from_fn(3, 16, 16, |c, y, x| ((c + y + x) % 7) as f64 / 6.0);
    let noisy = ImageTensor::from_fn(3, 16, 16, |c, y, x| {
        (clean.at(c, y, x) + 0.05 * (((y * 5 + x) % 3) as f64 - 1.0)).clamp(0.0, 1.0)
    });
    println!("PSNR      {:.2} dB", psnr(&clean, &noisy, 1.0)?);
    println!("SSIM      {:.4}", ssim(&clean, &noisy, 1.0)?);
    Ok(())
}
