//! Edits with image C where only a fraction of the nontarget pixels are
//! inpainted.
//!
//!     cargo run --release --example percent_pixels

mod common;

use segedit::metrics::evaluate;
use segedit::perturb::PerturbationSpec;
use segedit::rewrite::{edit_model, EditPlan, RewriteConfig, DEFAULT_STEPS};

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    println!("{}", common::line("None", &evaluate(&model, &ds.unseen(), 0.0)?));
    for fraction in [0.01, 0.35, 1.0] {
        let spec = PerturbationSpec::nontarget_to_mud(fraction);
        let plan = EditPlan::single("C", spec, RewriteConfig::with_steps(DEFAULT_STEPS));
        let outcome = edit_model(&model, &plan, &ds).map_err(|f| f.error)?;
        let label = format!("{}% ({} px)", fraction * 100.0, outcome.stages[0].changed_pixels);
        println!("{}", common::line(&label, &evaluate(&outcome.model, &ds.unseen(), 0.0)?));
    }
    Ok(())
}
