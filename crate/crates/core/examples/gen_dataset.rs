//! Generates the seed-7 benchmark and writes it, plus one perturbed preview
//! per perturbation kind, to a directory.
//!
//!     cargo run --example gen_dataset -- /tmp/benchmark

use std::path::PathBuf;

use segedit::perturb::{apply, PerturbationSpec, Selection};
use segedit::synthgen::{save_rgb_png, Dataset, GeneratorConfig, CLASS_CONFUSER, CLASS_TARGET};

fn main() -> segedit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "benchmark".into()));
    let ds = Dataset::generate(7, &GeneratorConfig::default())?;
    ds.save(&out)?;
    for s in &ds.samples {
        println!(
            "{:>2}: {} targets ({} px), {} confuser px, textures {:?}",
            s.id,
            s.num_instances(),
            s.class_pixel_count(CLASS_TARGET),
            s.class_pixel_count(CLASS_CONFUSER),
            s.textures
        );
    }
    let c = ds.require("C")?;
    let previews = [
        ("nontarget_to_mud", PerturbationSpec::nontarget_to_mud(1.0)),
        ("nontarget_to_mud_35", PerturbationSpec::nontarget_to_mud(0.35)),
        ("target_to_texture", PerturbationSpec::target_to_texture("C", Selection::Fraction { fraction: 1.0 })),
        ("occlude_targets", PerturbationSpec::occlude_targets()),
    ];
    for (name, spec) in previews {
        let p = apply(c, &spec, &ds)?;
        save_rgb_png(&p.image, &out.join(format!("C_{name}.png")))?;
        println!("C {name}: {} pixels changed", p.changed_count());
    }
    println!("wrote {}", out.display());
    Ok(())
}
