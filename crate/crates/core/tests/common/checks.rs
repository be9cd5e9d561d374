// Criterion checks shared by the focused tests and the acceptance run. Each
// returns a one-line summary on success and the first violation on failure.

use rand::Rng;

use segedit::metrics::{instance_metrics, mask_iou, match_instances};
use segedit::perturb::{apply, compose_simultaneous, PerturbationSpec, PerturbedImage, Selection};
use segedit::segnet::InstanceMask;
use segedit::synthgen::{Dataset, ImageSample, TextureTag, CLASS_CONFUSER, CLASS_TARGET};

use super::{mask_from, random_mask, rng, set_metrics};

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Brute-force matching: argmax IoU by set arithmetic, first index on ties.
fn oracle_match(gt: &[InstanceMask], pred: &[InstanceMask]) -> Vec<Option<usize>> {
    gt.iter()
        .map(|g| {
            let mut best = None;
            let mut best_iou = 0.0;
            for (j, p) in pred.iter().enumerate() {
                let (_, _, iou) = set_metrics(g, p);
                if iou > best_iou {
                    best_iou = iou;
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

fn compare_report(
    case: &str,
    gt: &[InstanceMask],
    pred: &[InstanceMask],
    expected: &[Option<(f64, f64, f64)>],
) -> Result<(), String> {
    let matches = match_instances(gt, pred).map_err(|e| format!("{case}: {e}"))?;
    ensure(matches == oracle_match(gt, pred), || format!("{case}: matching {matches:?}"))?;
    let report = instance_metrics(case, gt, pred, &matches).map_err(|e| format!("{case}: {e}"))?;
    for (row, want) in report.rows.iter().zip(expected) {
        let got = row.precision.zip(row.recall).zip(row.iou).map(|((p, r), i)| (p, r, i));
        ensure(got == *want, || format!("{case} gt {}: {got:?} != {want:?}", row.gt_id))?;
        if let Some((p, r, i)) = got {
            ensure(i <= p.min(r), || format!("{case}: iou {i} > min({p}, {r})"))?;
        }
    }
    Ok(())
}

/// Library metrics against set arithmetic on 100 random 16×16 pairs, a random
/// multi-instance matching per pair, and three hand-built 8×8 cases.
pub fn metric_oracle() -> Check {
    let mut g = rng(42);
    let mut pairs_checked = 0;
    for case in 0..100 {
        let density = g.random_range(0.05..0.6);
        let a = random_mask(&mut g, 16, 16, density);
        let density_b = g.random_range(0.05..0.6);
        let b = random_mask(&mut g, 16, 16, density_b);
        let (p, r, i) = set_metrics(&a, &b);
        let iou = mask_iou(&a, &b).map_err(|e| e.to_string())?;
        ensure(iou == i, || format!("pair {case}: iou {iou} != {i}"))?;
        let want = (i > 0.0).then_some((p, r, i));
        compare_report(&format!("pair {case}"), &[a.clone()], &[b.clone()], &[want])?;
        // symmetry of the intersection
        let (p2, r2, _) = set_metrics(&b, &a);
        ensure(p2 == r && r2 == p, || format!("pair {case}: asymmetric"))?;
        // several predictions per ground truth
        let gts: Vec<_> = (0..3).map(|_| random_mask(&mut g, 16, 16, 0.1)).collect();
        let preds: Vec<_> = (0..4).map(|_| random_mask(&mut g, 16, 16, 0.1)).collect();
        let want: Vec<_> = oracle_match(&gts, &preds)
            .iter()
            .zip(&gts)
            .map(|(m, gt)| m.map(|j| set_metrics(gt, &preds[j])))
            .collect();
        compare_report(&format!("multi {case}"), &gts, &preds, &want)?;
        pairs_checked += 1;
    }

    // a = {(0,0),(0,1)}, b = {(0,1),(1,1)}: one shared pixel of three
    let a = mask_from(8, 8, &[(0, 0), (0, 1)]);
    let b = mask_from(8, 8, &[(0, 1), (1, 1)]);
    ensure(mask_iou(&a, &b).unwrap() == 1.0 / 3.0, || "hand 1: iou".into())?;
    compare_report("hand 1", &[a], &[b], &[Some((0.5, 0.5, 1.0 / 3.0))])?;

    // prediction strictly contains the ground truth: 4 of 16 pixels
    let square = |r0: usize, c0: usize, n: usize| -> Vec<(usize, usize)> {
        (r0..r0 + n).flat_map(|r| (c0..c0 + n).map(move |c| (r, c))).collect()
    };
    let gt = mask_from(8, 8, &square(2, 2, 2));
    let pred = mask_from(8, 8, &square(1, 1, 4));
    compare_report("hand 2", &[gt], &[pred], &[Some((0.25, 1.0, 0.25))])?;

    // two ground truths share one big prediction; a small one wins for the
    // first; a third ground truth touches nothing
    let rows = |r0: usize, r1: usize, c1: usize| -> Vec<(usize, usize)> {
        (r0..r1).flat_map(|r| (0..c1).map(move |c| (r, c))).collect()
    };
    let gt1 = mask_from(8, 8, &rows(0, 2, 4));
    let gt2 = mask_from(8, 8, &rows(4, 6, 4));
    let gt3 = mask_from(8, 8, &[(7, 6), (7, 7)]);
    let big = mask_from(8, 8, &rows(0, 6, 4));
    let small = mask_from(8, 8, &rows(0, 2, 2));
    let gts = [gt1, gt2, gt3];
    let preds = [big, small];
    let want = [Some((1.0, 0.5, 0.5)), Some((8.0 / 24.0, 1.0, 8.0 / 24.0)), None];
    compare_report("hand 3", &gts, &preds, &want)?;
    let matches = match_instances(&gts, &preds).unwrap();
    ensure(matches == [Some(1), Some(0), None], || format!("hand 3: {matches:?}"))?;
    let report = instance_metrics("hand 3", &gts, &preds, &matches).unwrap();
    let agg = report.aggregates.ok_or("hand 3: no aggregates")?;
    let mean_p = (1.0 + 8.0 / 24.0) / 2.0;
    ensure(
        (agg.precision.mean - mean_p).abs() < 1e-15 && report.counts.unmatched == 1,
        || format!("hand 3: aggregates {agg:?}"),
    )?;
    Ok(format!("{pairs_checked} random pairs + 100 multi-instance sets + 3 hand cases exact"))
}

fn pixel_indices(sample: &ImageSample, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..sample.pixel_count()).filter(|&p| keep(p)).collect()
}

/// Bit-identical outside `changed_pixels`.
fn untouched_outside(sample: &ImageSample, out: &PerturbedImage) -> Result<(), String> {
    let plane = sample.pixel_count();
    for p in 0..plane {
        if out.changed_pixels[p] {
            continue;
        }
        for ch in 0..3 {
            let (a, b) = (sample.image.data()[ch * plane + p], out.image.data()[ch * plane + p]);
            ensure(a.to_bits() == b.to_bits(), || {
                format!("{}: pixel {p} channel {ch} changed outside the changed set", sample.id)
            })?;
        }
    }
    Ok(())
}

/// Requested pixel counts for the fraction and instance-subset grids, and
/// bit-identity outside the changed pixels, on every training image.
pub fn perturbation_accounting(ds: &Dataset) -> Check {
    let mut cases = 0;
    for sample in ds.train() {
        let confusers = sample.class_pixel_count(CLASS_CONFUSER);
        for fraction in [0.0, 0.01, 0.35, 1.0] {
            let spec = PerturbationSpec::nontarget_to_mud(fraction);
            let out = apply(sample, &spec, ds).map_err(|e| e.to_string())?;
            let want = (fraction * confusers as f64).round() as usize;
            ensure(out.changed_count() == want, || {
                format!("{} fraction {fraction}: {} changed, want {want}", sample.id, out.changed_count())
            })?;
            ensure(
                pixel_indices(sample, |p| out.changed_pixels[p])
                    .iter()
                    .all(|&p| sample.class_map[p] == CLASS_CONFUSER),
                || format!("{} fraction {fraction}: changed a non-confuser pixel", sample.id),
            )?;
            untouched_outside(sample, &out)?;
            cases += 1;
        }

        let k = sample.num_instances() as u16;
        let first_b = sample.textures.iter().position(|&t| t == TextureTag::B).map(|i| i as u16 + 1);
        let half = ((k as f64) * 0.5).ceil() as u16;
        let mut subsets: Vec<(Selection, Vec<u16>)> = vec![
            (Selection::InstanceFraction { fraction: 0.5 }, (1..=half).collect()),
            (Selection::Instances { ids: (1..=k).collect() }, (1..=k).collect()),
        ];
        if let Some(id) = first_b {
            subsets.insert(0, (Selection::OneMudFilled, vec![id]));
        }
        for (selection, ids) in subsets {
            let spec = PerturbationSpec::target_to_texture(&sample.id, selection.clone());
            let out = apply(sample, &spec, ds).map_err(|e| e.to_string())?;
            let want: usize = ids
                .iter()
                .map(|&id| sample.instance_map.iter().filter(|&&v| v == id).count())
                .sum();
            ensure(out.changed_count() == want, || {
                format!("{} {selection:?}: {} changed, want {want}", sample.id, out.changed_count())
            })?;
            ensure(
                pixel_indices(sample, |p| out.changed_pixels[p])
                    .iter()
                    .all(|&p| ids.contains(&sample.instance_map[p])),
                || format!("{} {selection:?}: changed pixels outside the chosen instances", sample.id),
            )?;
            untouched_outside(sample, &out)?;
            cases += 1;
        }

        // disjoint composition: the changed set is the union of the children's
        let children = [
            PerturbationSpec::nontarget_to_mud(1.0),
            PerturbationSpec::target_to_texture(&sample.id, Selection::InstanceFraction { fraction: 1.0 }),
        ];
        let out = compose_simultaneous(sample, &children, ds).map_err(|e| e.to_string())?;
        let parts: Vec<_> = children.iter().map(|c| apply(sample, c, ds).unwrap()).collect();
        for p in 0..sample.pixel_count() {
            let union = parts.iter().any(|c| c.changed_pixels[p]);
            ensure(out.changed_pixels[p] == union, || format!("{}: composition pixel {p}", sample.id))?;
        }
        let want = sample.class_pixel_count(CLASS_CONFUSER) + sample.class_pixel_count(CLASS_TARGET);
        ensure(out.changed_count() == want, || format!("{}: composition count", sample.id))?;
        untouched_outside(sample, &out)?;
        cases += 1;
    }
    Ok(format!("{cases} perturbations with exact counts, untouched elsewhere"))
}
