//! Hides every target on each training image and counts the instances the
//! baseline still detects on confuser regions.
//!
//!     cargo run --release --example occlusion_probe

mod common;

use segedit::harness::{occlusion_probe, probe_markdown};

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    let rows = ds
        .train()
        .into_iter()
        .map(|s| occlusion_probe(&model, s, 0.0))
        .collect::<segedit::Result<Vec<_>>>()?;
    print!("{}", probe_markdown(&rows));
    let hit = rows.iter().filter(|r| r.confuser_false_positives > 0).count();
    println!("{hit} of {} images produce detections on confusers", rows.len());
    Ok(())
}
