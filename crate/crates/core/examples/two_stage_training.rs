//! Two-stage training on the desk-scale synthetic corpus.
//!
//! Run with `cargo run --release --example two_stage_training`.

use std::time::Instant;

use ulrseg::datakit::{make_splits, synth_generate, DatasetSpec, Sample};
use ulrseg::trainer::{
    pretrain_stage1, train_stage2_joint, validate, ModelConfig, TrainConfig, TrainLog,
};

fn main() -> ulrseg::Result<()> {
    let spec = DatasetSpec::desk("unused");
    let corpus = synth_generate(&spec)?;
    let splits = make_splits(&spec, corpus.len())?;
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| corpus[i].clone()).collect() };
    let (train, val) = (pick(&splits.train), pick(&splits.val));

    let models = ModelConfig::toy(spec.num_classes);
    let cfg = TrainConfig::desk();
    let echo = serde_json::json!({ "example": "two_stage_training" });

    let t0 = Instant::now();
    let mut log = TrainLog::memory(echo.clone());
    let s1 = pretrain_stage1(&models, &cfg, &train, &mut log)?;
    let first = s1.losses.first().and_then(|b| b.l1).unwrap_or(f64::NAN);
    let last = s1.losses.last().and_then(|b| b.l1).unwrap_or(f64::NAN);
    println!(
        "stage 1: pixel MAE {first:.4} -> {last:.4} in {:.1?}",
        t0.elapsed()
    );

    let t1 = Instant::now();
    let mut log = TrainLog::memory(echo);
    let s2 = train_stage2_joint(&models, &cfg, &train, &val, Some(&s1.checkpoint), &mut log)?;
    for (i, b) in s2.losses.iter().enumerate().step_by(20) {
        println!("step {:>3}: {}", i + 1, serde_json::to_string(b)?);
    }
    println!(
        "stage 2: train mIoU {:.3}, best val mIoU {:?} in {:.1?}",
        validate(&s2.model, &train, cfg.ignore_index)?,
        s2.best.meta.val_miou,
        t1.elapsed()
    );
    Ok(())
}
