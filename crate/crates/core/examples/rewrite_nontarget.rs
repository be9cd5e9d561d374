//! Single-image nontarget-to-mud edit: loss trace per layer and the
//! unseen-pool metrics before and after, for every training image.
//!
//!     cargo run --release --example rewrite_nontarget [-- C]

mod common;

use segedit::metrics::evaluate;
use segedit::perturb::PerturbationSpec;
use segedit::rewrite::{edit_model, EditPlan, RewriteConfig, DEFAULT_STEPS};
use segedit::synthgen::TRAIN_IDS;

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    let only = std::env::args().nth(1);
    println!("{}", common::line("None", &evaluate(&model, &ds.unseen(), 0.0)?));
    for id in TRAIN_IDS.iter().filter(|id| only.as_deref().is_none_or(|o| o == **id)) {
        let plan = EditPlan::single(id, PerturbationSpec::nontarget_to_mud(1.0), RewriteConfig::with_steps(DEFAULT_STEPS));
        let outcome = edit_model(&model, &plan, &ds).map_err(|f| f.error)?;
        for t in &outcome.stages[0].traces {
            println!(
                "  {id} layer {}: L1 {:.4} -> {:.4} ({:.0}%)",
                t.layer.0,
                t.initial_loss(),
                t.final_loss,
                100.0 * t.final_loss / t.initial_loss()
            );
        }
        println!("{}", common::line(id, &evaluate(&outcome.model, &ds.unseen(), 0.0)?));
    }
    Ok(())
}
