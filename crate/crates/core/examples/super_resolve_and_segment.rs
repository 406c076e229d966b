//! One synthetic sample through an untrained generator and segmenter, showing shapes and scores.
//!
//! Run with `cargo run --release --example super_resolve_and_segment`.

use ulrseg::datakit::{synth_generate, DatasetSpec};
use ulrseg::metrics::{miou, psnr};
use ulrseg::segnet::{build_segnet, predict_labels, segment};
use ulrseg::srgen::{build_generator, generate};
use ulrseg::trainer::ModelConfig;

fn main() -> ulrseg::Result<()> {
    let mut spec = DatasetSpec::desk("unused");
    spec.split_sizes = (2, 0, 0);
    let sample = &synth_generate(&spec)?[0];
    let models = ModelConfig::toy(spec.num_classes);
    let g = build_generator(&models.generator, 1)?;
    let s = build_segnet(&models.segmenter, 2)?;

    let sr = generate(&g, &sample.lr)?;
    let logits = segment(&s, &sr)?;
    let labels = predict_labels(&logits);
    println!(
        "{}×{} input -> {}×{} image -> {} class scores per pixel",
        sample.lr.height(),
        sample.lr.width(),
        sr.height(),
        sr.width(),
        logits.num_classes()
    );
    println!("untrained PSNR {:.2} dB", psnr(&sr, &sample.hr, 1.0)?);
    println!(
        "untrained mIoU {:.3}",
        miou(&labels, &sample.label, spec.num_classes, 255)?
    );
    Ok(())
}
