//! Saves a generator to a checkpoint, reloads it into a fresh model and compares outputs.
//!
//! Run with `cargo run --example checkpoint_roundtrip`.

use ulrseg::checkpoint::{Checkpoint, GENERATOR};
use ulrseg::srgen::{build_generator, generate, GeneratorConfig};
use ulrseg::ImageTensor;

fn main() -> ulrseg::Result<()> {
    let cfg = GeneratorConfig::toy();
    let original = build_generator(&cfg, 11)?;
    let mut ck = Checkpoint::new(
        1,
        0,
        0,
        serde_json::json!({ "example": "checkpoint_roundtrip" }),
    );
    ck.put_module(GENERATOR, &original);

    let path = std::env::temp_dir().join("ulrseg_example.ulrck");
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    std::fs::remove_file(&path).ok();
    println!(
        "sections {:?}, {} bytes",
        loaded.sections(),
        ck.to_bytes()?.len()
    );

    let mut restored = build_generator(&cfg, 99)?;
    loaded.load_module(GENERATOR, &mut restored)?;
    let lr = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c * 3 + y + 2 * x) % 5) as f64 / 4.0);
    let same =
        generate(&original, &lr)?.tensor().data() == generate(&restored, &lr)?.tensor().data();
    println!("restored generator reproduces the original: {same}");
    Ok(())
}
