//! Target-to-texture edits and the simultaneous nontarget+texture mapping,
//! reported with the flag raised when they beat the unedited model.
//!
//!     cargo run --release --example texture_mapping

mod common;

use segedit::metrics::evaluate;
use segedit::perturb::{PerturbationSpec, Selection};
use segedit::rewrite::{edit_model, EditPlan, RewriteConfig, DEFAULT_STEPS};

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    let base = evaluate(&model, &ds.unseen(), 0.0)?;
    println!("{}", common::line("None", &base));
    let cfg = RewriteConfig::with_steps(DEFAULT_STEPS);
    let texture = |sel| PerturbationSpec::target_to_texture("D", sel);
    let rows = [
        ("Ar", texture(Selection::Fraction { fraction: 1.0 })),
        ("Ar one", texture(Selection::OneMudFilled)),
        ("Ar 50% inst", texture(Selection::InstanceFraction { fraction: 0.5 })),
        (
            "No+Ar",
            PerturbationSpec::compose(vec![
                PerturbationSpec::nontarget_to_mud(1.0),
                texture(Selection::Fraction { fraction: 1.0 }),
            ]),
        ),
    ];
    for (label, spec) in rows {
        let outcome = edit_model(&model, &EditPlan::single("D", spec, cfg.clone()), &ds).map_err(|f| f.error)?;
        let report = evaluate(&outcome.model, &ds.unseen(), 0.0)?;
        let flag = match (report.precision(), base.precision()) {
            (Some(p), Some(b)) if p > b => "  <- improves precision",
            _ => "",
        };
        println!("{}{flag}", common::line(label, &report));
    }
    Ok(())
}
