//! Trains the baseline segmenter on the six training images and reports
//! pixel accuracy and unseen-pool instance metrics.
//!
//!     cargo run --release --example train_baseline -- /tmp/baseline

use std::path::PathBuf;

use segedit::metrics::evaluate;
use segedit::segnet::{mean_pixel_accuracy, train, ModelConfig, SegModel, TrainConfig};
use segedit::synthgen::{Dataset, GeneratorConfig};

fn main() -> segedit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "baseline".into()));
    let ds = Dataset::generate(7, &GeneratorConfig::default())?;
    let mut model = SegModel::new(ModelConfig::default())?;
    let started = std::time::Instant::now();
    let report = train(&mut model, &ds.train(), &TrainConfig::default())?;
    println!("trained in {:.1}s", started.elapsed().as_secs_f64());
    for (epoch, loss) in report.loss_curve.iter().enumerate().step_by(25) {
        println!("epoch {epoch:>3}: loss {loss:.4}");
    }
    println!("train pixel accuracy {:.3}", report.pixel_accuracy);
    println!("unseen pixel accuracy {:.3}", mean_pixel_accuracy(&model, &ds.unseen())?);
    print!("{}", evaluate(&model, &ds.unseen(), 0.0)?.to_markdown());
    model.save(&out)?;
    println!("checkpoint {} -> {}", model.parameter_hash(), out.display());
    Ok(())
}
