//! Instance-matched evaluation: each ground-truth instance is matched to its
//! highest-IoU prediction, and precision/recall/IoU are averaged over the
//! matched instances only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::{extract_instances, InstanceMask, SegModel, DEFAULT_MIN_AREA};
use crate::synthgen::ImageSample;

/// `|a ∩ b| / |a ∪ b|`; `a` must be non-empty.
pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> Result<f64> {
    let (inter, a_area, b_area) = overlap_counts(a, b)?;
    if a_area == 0 {
        return Err(Error::invalid("IoU against an empty ground-truth mask"));
    }
    Ok(inter as f64 / (a_area + b_area - inter) as f64)
}

fn overlap_counts(a: &InstanceMask, b: &InstanceMask) -> Result<(usize, usize, usize)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "mask overlap",
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    let mut inter = 0;
    let mut a_area = 0;
    let mut b_area = 0;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        a_area += x as usize;
        b_area += y as usize;
        inter += (x && y) as usize;
    }
    Ok((inter, a_area, b_area))
}

/// Best-IoU prediction for each ground truth, `None` when every IoU is 0.
/// Ties go to the lower prediction index; a prediction may serve several
/// ground truths.
pub fn match_instances(gt: &[InstanceMask], pred: &[InstanceMask]) -> Result<Vec<Option<usize>>> {
    gt.iter()
        .map(|g| {
            let mut best: Option<(usize, f64)> = None;
            for (j, p) in pred.iter().enumerate() {
                let iou = mask_iou(g, p)?;
                if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            Ok(best.map(|(j, _)| j))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `None` for an empty population.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub image_id: String,
    pub gt_id: usize,
    pub matched_pred: Option<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub iou: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gt_total: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub predictions: usize,
}

/// Images a report was computed over, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: EvalTarget,
    pub rows: Vec<InstanceRow>,
    /// `None` when nothing matched.
    pub aggregates: Option<Aggregates>,
    pub counts: Counts,
}

impl MetricsReport {
    /// Recomputes aggregates and counts from `rows`.
    pub fn from_rows(target: EvalTarget, rows: Vec<InstanceRow>, predictions: usize) -> Self {
        let matched: Vec<&InstanceRow> = rows.iter().filter(|r| r.matched_pred.is_some()).collect();
        let collect = |f: fn(&InstanceRow) -> Option<f64>| -> Vec<f64> {
            matched.iter().filter_map(|r| f(r)).collect()
        };
        let aggregates = match (
            MeanStd::of(&collect(|r| r.precision)),
            MeanStd::of(&collect(|r| r.recall)),
            MeanStd::of(&collect(|r| r.iou)),
        ) {
            (Some(precision), Some(recall), Some(iou)) => Some(Aggregates {
                precision,
                recall,
                iou,
            }),
            _ => None,
        };
        let counts = Counts {
            gt_total: rows.len(),
            matched: matched.len(),
            unmatched: rows.len() - matched.len(),
            predictions,
        };
        Self {
            target,
            rows,
            aggregates,
            counts,
        }
    }

    pub fn precision(&self) -> Option<f64> {
        self.aggregates.map(|a| a.precision.mean)
    }

    pub fn recall(&self) -> Option<f64> {
        self.aggregates.map(|a| a.recall.mean)
    }

    pub fn iou(&self) -> Option<f64> {
        self.aggregates.map(|a| a.iou.mean)
    }

    /// Per-instance rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,gt_id,matched_pred,precision,recall,iou\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id,
                r.gt_id,
                r.matched_pred.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.precision),
                opt(r.recall),
                opt(r.iou)
            );
        }
        out
    }

    /// Aggregate table in `mean ± std` form.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Images: {}", self.target.image_ids.join(", "));
        let _ = writeln!(
            out,
            "Instances: {} ground truth, {} matched, {} unmatched, {} predicted\n",
            self.counts.gt_total, self.counts.matched, self.counts.unmatched, self.counts.predictions
        );
        out.push_str("| Precision | Recall | IoU |\n|---|---|---|\n");
        match &self.aggregates {
            Some(a) => {
                let _ = writeln!(out, "| {} | {} | {} |", a.precision, a.recall, a.iou);
            }
            None => out.push_str("| n/a | n/a | n/a |\n"),
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join("report.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Per-instance rows for one image.
pub fn instance_rows(
    image_id: &str,
    gt: &[InstanceMask],
    pred: &[InstanceMask],
    matches: &[Option<usize>],
) -> Result<Vec<InstanceRow>> {
    if matches.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} matches for {} ground-truth instances",
            matches.len(),
            gt.len()
        )));
    }
    gt.iter()
        .zip(matches)
        .enumerate()
        .map(|(k, (g, m))| {
            let mut row = InstanceRow {
                image_id: image_id.to_string(),
                gt_id: k + 1,
                matched_pred: *m,
                precision: None,
                recall: None,
                iou: None,
            };
            if let Some(j) = *m {
                let p = pred
                    .get(j)
                    .ok_or_else(|| Error::invalid(format!("match index {j} out of range")))?;
                let (inter, g_area, p_area) = overlap_counts(g, p)?;
                row.precision = Some(inter as f64 / p_area as f64);
                row.recall = Some(inter as f64 / g_area as f64);
                row.iou = Some(inter as f64 / (g_area + p_area - inter) as f64);
            }
            Ok(row)
        })
        .collect()
}

/// Report for a single image's ground truth and predictions.
pub fn instance_metrics(
    image_id: &str,
    gt: &[InstanceMask],
    pred: &[InstanceMask],
    matches: &[Option<usize>],
) -> Result<MetricsReport> {
    let rows = instance_rows(image_id, gt, pred, matches)?;
    Ok(MetricsReport::from_rows(
        EvalTarget {
            image_ids: vec![image_id.to_string()],
        },
        rows,
        pred.len(),
    ))
}

/// Predicted instances of one image.
pub fn predict_instances(model: &SegModel, image: &crate::numerics::Tensor, threshold: f32) -> Result<Vec<InstanceMask>> {
    let probs = model.predict_pixels(image)?;
    extract_instances(&probs, threshold, DEFAULT_MIN_AREA)
}

/// Pools ground-truth instances over `samples` into one report.
pub fn evaluate(model: &SegModel, samples: &[&ImageSample], threshold: f32) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut predictions = 0;
    for s in samples {
        let pred = predict_instances(model, &s.image, threshold).map_err(|e| Error::Stage {
            stage: format!("evaluate {}", s.id),
            reason: e.to_string(),
        })?;
        let gt = InstanceMask::ground_truth(s);
        let matches = match_instances(&gt, &pred)?;
        rows.extend(instance_rows(&s.id, &gt, &pred, &matches)?);
        predictions += pred.len();
    }
    Ok(MetricsReport::from_rows(
        EvalTarget {
            image_ids: samples.iter().map(|s| s.id.clone()).collect(),
        },
        rows,
        predictions,
    ))
}
