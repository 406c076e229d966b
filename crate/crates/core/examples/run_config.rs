//! Prints a preset run configuration as TOML, or validates a given file.
//!
//! ```text
//! cargo run --example run_config -- desk > configs/desk.toml
//! cargo run --example run_config -- --check configs/full.toml
//! ```

use std::path::Path;

use ulrseg::config::RunConfig;

fn main() -> ulrseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.as_slice() {
        [flag, path] if flag == "--check" => {
            let cfg = RunConfig::load(Path::new(path))?;
            println!(
                "{path}: ok ({} classes, {}→{} px, batch {}, lr {})",
                cfg.dataset.num_classes,
                cfg.dataset.lr_size,
                cfg.dataset.crop_size,
                cfg.train.batch_size,
                cfg.train.lr
            );
        }
        [preset] => print!("{}", RunConfig::preset(preset)?.to_toml()?),
        _ => print!("{}", RunConfig::desk().to_toml()?),
    }
    Ok(())
}
