//! Runs a small single-edit experiment through the harness and prints the
//! side-by-side comparison of the original and edited reports.
//!
//!     cargo run --release --example compare_reports -- /tmp/compare-run

use std::path::PathBuf;

use segedit::harness::{compare, load_report, run, ExperimentConfig, ExperimentKind, RunOptions};

fn main() -> segedit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "compare-run".into()));
    let mut config = ExperimentConfig::new("compare", ExperimentKind::EditSingle);
    config.edit.images = vec!["C".into()];
    let opts = RunOptions {
        force: false,
        cache: Some(std::env::temp_dir().join("segedit-example-cache")),
    };
    let summary = run(&config, &out, &opts)?;
    let original = load_report(&out.join("rows/None/unseen"))?;
    let edited = load_report(&out.join("rows/C/unseen"))?;
    print!("{}", compare(&original, &edited)?.to_markdown("Original", "Edited"));
    println!("\nconfig {}  files {}", summary.config_hash, summary.files.len());
    Ok(())
}
