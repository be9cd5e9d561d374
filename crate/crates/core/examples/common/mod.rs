// Shared by the examples: the benchmark and its baseline, trained once and
// cached under the system temp directory.

use segedit::harness::{obtain_baseline, obtain_dataset, ExperimentConfig, ExperimentKind};
use segedit::segnet::SegModel;
use segedit::synthgen::Dataset;

pub fn benchmark() -> segedit::Result<(Dataset, SegModel)> {
    let cache = std::env::temp_dir().join("segedit-example-cache");
    let config = ExperimentConfig::new("example", ExperimentKind::Baseline);
    let ds = obtain_dataset(&config.dataset, Some(&cache))?;
    let (model, _) = obtain_baseline(&config, &ds, Some(&cache))?;
    Ok((ds, model))
}

#[allow(dead_code)]
pub fn line(label: &str, report: &segedit::metrics::MetricsReport) -> String {
    match report.aggregates {
        Some(a) => format!("{label:<12} P {}  R {}  IoU {}", a.precision, a.recall, a.iou),
        None => format!("{label:<12} no matches"),
    }
}
