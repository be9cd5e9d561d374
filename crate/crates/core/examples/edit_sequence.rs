//! Multi-image edit sequences against the single edit with their last image.
//!
//!     cargo run --release --example edit_sequence

mod common;

use segedit::metrics::evaluate;
use segedit::perturb::PerturbationSpec;
use segedit::rewrite::{edit_model, EditPlan, RewriteConfig, DEFAULT_STEPS};

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    let spec = PerturbationSpec::nontarget_to_mud(1.0);
    let cfg = RewriteConfig::with_steps(DEFAULT_STEPS);
    for seq in [&["C"][..], &["B", "C"], &["A", "B", "C"], &["C", "B", "A"], &["A"]] {
        let outcome = edit_model(&model, &EditPlan::sequence(seq, &spec, &cfg), &ds).map_err(|f| f.error)?;
        for s in &outcome.stages {
            println!("  stage {} captured under {}", s.image_id, &s.captured_under[..12]);
        }
        println!("{}", common::line(&seq.join(","), &evaluate(&outcome.model, &ds.unseen(), 0.0)?));
    }
    Ok(())
}
