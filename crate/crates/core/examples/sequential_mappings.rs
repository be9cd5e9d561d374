//! Two mappings on the same image in both orders, next to each mapping alone.
//!
//!     cargo run --release --example sequential_mappings

mod common;

use segedit::metrics::evaluate;
use segedit::perturb::{PerturbationSpec, Selection};
use segedit::rewrite::{sequential_mappings, RewriteConfig, DEFAULT_STEPS};

fn main() -> segedit::Result<()> {
    let (ds, model) = common::benchmark()?;
    let cfg = RewriteConfig::with_steps(DEFAULT_STEPS);
    let no = PerturbationSpec::nontarget_to_mud(1.0);
    let ar = PerturbationSpec::target_to_texture("C", Selection::Fraction { fraction: 1.0 });
    let orders = [
        ("No", vec![no.clone()]),
        ("Ar", vec![ar.clone()]),
        ("No,Ar", vec![no.clone(), ar.clone()]),
        ("Ar,No", vec![ar, no]),
    ];
    for (label, specs) in orders {
        let outcome = sequential_mappings(&model, "C", &specs, &cfg, &ds).map_err(|f| f.error)?;
        let report = evaluate(&outcome.model, &ds.unseen(), 0.0)?;
        println!("{}  model {}", common::line(label, &report), &outcome.model.parameter_hash()[..12]);
    }
    Ok(())
}
