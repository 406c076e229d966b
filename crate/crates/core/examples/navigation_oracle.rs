//! Oracle-perception navigation over every bundled world.
//!
//! Run with `cargo run --release --example navigation_oracle`.

use std::path::Path;

use ulrseg::navsim::{run_protocol, Grid, NavConfig, OraclePerception, Perception};

fn main() -> ulrseg::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("worlds");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| ulrseg::Error::Invalid(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let cfg = NavConfig::default();
    for path in paths {
        let grid = Grid::load(&path)?;
        let (records, table) = run_protocol(&grid, &cfg, 1, None, &mut |_| {
            Ok(Box::new(OraclePerception) as Box<dyn Perception>)
        })?;
        print!("{}", table.render());
        for r in &records {
            println!(
                "  {} from {}: {:?} in {} steps",
                r.target, r.start, r.status, r.steps
            );
        }
    }
    Ok(())
}
