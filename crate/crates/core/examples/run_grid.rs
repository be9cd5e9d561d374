//! Runs the whole experiment grid (probe, single, percent, sequence,
//! texture, simultaneous, sequential mappings) into one directory.
//!
//!     cargo run --release --example run_grid -- /tmp/grid

use std::path::PathBuf;

use segedit::harness::{grid, full_grid};

fn main() -> segedit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "grid-run".into()));
    let report = grid(&full_grid(), &out, false)?;
    print!("{}", report.to_markdown());
    if !report.all_ok() {
        std::process::exit(2);
    }
    Ok(())
}
