// All acceptance criteria on the fixed-seed benchmark, one line each.
//
//     cargo test --test acceptance -- --nocapture

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::checks::{metric_oracle, perturbation_accounting, Check};
use common::{gradcheck_suite, FD_TOL};
use segedit::harness::{
    load_stages, obtain_baseline, obtain_dataset, run, ExperimentConfig, ExperimentKind, RunOptions,
    RunSummary,
};
use segedit::perturb::PerturbationSpec;
use segedit::rewrite::{edit_model, EditPlan, EditStage, RewriteConfig};
use segedit::segnet::SegModel;
use segedit::synthgen::{Dataset, TRAIN_IDS};
use segedit::Error;

const EDIT_GAIN: f64 = 0.02;
const EDIT_LOSS: f64 = 0.02;
const RECALL_RISE: f64 = 0.02;
const PERCENT_SLACK: f64 = 0.01;
const SEQUENCE_TOL: f64 = 0.05;
const MAPPING_TOL: f64 = 0.05;
const CONVERGENCE_RATIO: f64 = 0.5;
const WINDOW: usize = 100;

fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Bench {
    cache: tempfile::TempDir,
    out: tempfile::TempDir,
    dataset: Dataset,
    baseline: SegModel,
}

impl Bench {
    fn opts(&self) -> RunOptions {
        RunOptions { force: false, cache: Some(self.cache.path().to_path_buf()) }
    }

    fn run(&self, config: &ExperimentConfig) -> Result<(RunSummary, f64), String> {
        let t = Instant::now();
        let s = run(config, &self.out.path().join(&config.name), &self.opts()).map_err(|e| e.to_string())?;
        Ok((s, t.elapsed().as_secs_f64()))
    }
}

fn precision(s: &RunSummary, label: &str) -> Result<f64, String> {
    s.precision(label).ok_or_else(|| format!("{}: no precision for row {label}", s.name))
}

fn recall(s: &RunSummary, label: &str) -> Result<f64, String> {
    s.row(label)
        .and_then(|r| r.recall)
        .map(|m| m.mean)
        .ok_or_else(|| format!("{}: no recall for row {label}", s.name))
}

fn gradients() -> Check {
    let t = Instant::now();
    let suite = gradcheck_suite(24);
    let secs = t.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    for (op, s) in &suite {
        if s.cases < 20 || s.checked <= s.skipped || s.worst > FD_TOL {
            return Err(format!("{op}: {} cases, worst {:.2e} at {}", s.cases, s.worst, s.worst_at));
        }
        parts.push(format!("{op} {:.1e}", s.worst));
    }
    if secs >= 30.0 {
        return Err(format!("took {secs:.1}s (budget 30s)"));
    }
    Ok(format!("worst rel err {} ({secs:.1}s)", parts.join(", ")))
}

fn timed(budget: f64, check: impl FnOnce() -> Check) -> Check {
    let t = Instant::now();
    let msg = check()?;
    let secs = t.elapsed().as_secs_f64();
    if secs >= budget {
        return Err(format!("{msg}; took {secs:.1}s (budget {budget}s)"));
    }
    Ok(format!("{msg} ({secs:.1}s)"))
}

fn probe(s: &RunSummary) -> Check {
    let hits: Vec<String> = s
        .probe
        .iter()
        .map(|r| format!("{}:{}", r.image_id, r.confuser_false_positives))
        .collect();
    let n = s.probe.iter().filter(|r| r.confuser_false_positives >= 1).count();
    let msg = format!("{n}/6 images with a confuser false positive [{}]", hits.join(" "));
    if n >= 4 { Ok(msg) } else { Err(msg) }
}

fn convergence(dir: &Path, secs: f64) -> Check {
    let mut worst_ratio: f64 = 0.0;
    let mut worst_window = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for id in TRAIN_IDS {
        let stages = load_stages(dir, id).map_err(|e| e.to_string())?;
        for t in &stages[0].traces {
            let ratio = t.final_loss / t.initial_loss();
            let inc = t.max_window_increase(WINDOW);
            worst_ratio = worst_ratio.max(ratio);
            worst_window = worst_window.max(inc);
            if ratio > CONVERGENCE_RATIO || inc > 0.0 {
                bad.push(format!("{id}/L{} {ratio:.2}", t.layer.0));
            }
        }
    }
    let msg = format!(
        "max final/initial {worst_ratio:.3} (need <= {CONVERGENCE_RATIO}), max {WINDOW}-step window increase {worst_window:.2e}, edits {secs:.0}s"
    );
    if !bad.is_empty() {
        return Err(format!("{msg}; over ratio: {}", bad.join(" ")));
    }
    if secs >= 300.0 {
        return Err(format!("{msg}; over the 300s budget"));
    }
    Ok(msg)
}

fn single_edits(s: &RunSummary, secs: f64) -> Check {
    let p0 = precision(s, "None")?;
    let r0 = recall(s, "None")?;
    let mut gains = 0;
    let mut cells = Vec::new();
    let mut bad = Vec::new();
    for id in TRAIN_IDS {
        let (p, r) = (precision(s, id)?, recall(s, id)?);
        if p - p0 >= EDIT_GAIN {
            gains += 1;
        }
        if p - p0 < -EDIT_LOSS {
            bad.push(format!("{id} precision {:+.3}", p - p0));
        }
        if r - r0 > RECALL_RISE {
            bad.push(format!("{id} recall {:+.3}", r - r0));
        }
        cells.push(format!("{id} {:+.3}/{:+.3}", p - p0, r - r0));
    }
    let msg = format!(
        "baseline P {p0:.3} R {r0:.3}; dP/dR {}; {gains}/6 gain >= {EDIT_GAIN} ({secs:.0}s)",
        cells.join(" ")
    );
    if gains < 4 {
        bad.push(format!("only {gains} gains"));
    }
    if secs >= 900.0 {
        bad.push("over the 900s budget".into());
    }
    if bad.is_empty() { Ok(msg) } else { Err(format!("{msg}; {}", bad.join(", "))) }
}

fn percent(s: &RunSummary) -> Check {
    let (p1, p35, p100) = (precision(s, "1%")?, precision(s, "35%")?, precision(s, "100%")?);
    let msg = format!("P(1%) {p1:.3}, P(35%) {p35:.3}, P(100%) {p100:.3}");
    if p100 >= p35 && p35 >= p1 - PERCENT_SLACK { Ok(msg) } else { Err(msg) }
}

fn sequence(seq: &RunSummary, single: &RunSummary) -> Check {
    let (abc, c) = (precision(seq, "A,B,C")?, precision(single, "C")?);
    let msg = format!("P(A,B,C) {abc:.3} vs P(C) {c:.3}, |diff| {:.3}", (abc - c).abs());
    if (abc - c).abs() <= SEQUENCE_TOL { Ok(msg) } else { Err(msg) }
}

fn mapping(s: &RunSummary) -> Check {
    let labels: Vec<&str> = s.rows.iter().map(|r| r.label.as_str()).collect();
    let [_, no, ar, no_ar, ar_no] = labels[..] else {
        return Err(format!("unexpected rows {labels:?}"));
    };
    let d1 = (precision(s, no_ar)? - precision(s, ar)?).abs();
    let d2 = (precision(s, ar_no)? - precision(s, no)?).abs();
    let msg = format!(
        "P(No) {:.3} P(Ar) {:.3} P(No,Ar) {:.3} P(Ar,No) {:.3}; |diffs| {d1:.3} {d2:.3}",
        precision(s, no)?,
        precision(s, ar)?,
        precision(s, no_ar)?,
        precision(s, ar_no)?
    );
    if d1 <= MAPPING_TOL && d2 <= MAPPING_TOL { Ok(msg) } else { Err(msg) }
}

fn determinism(bench: &Bench, config: &ExperimentConfig, first: &RunSummary) -> Check {
    let fresh = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = run(config, fresh.path(), &RunOptions::default()).map_err(|e| e.to_string())?;
    if second.files != first.files {
        let differ: Vec<&String> = first
            .files
            .iter()
            .filter(|(k, v)| second.files.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(format!("reruns differ in {differ:?}"));
    }
    if second.baseline_hash != bench.baseline.parameter_hash() {
        return Err("retrained baseline differs from the cached one".into());
    }

    let ckpt = tempfile::tempdir().map_err(|e| e.to_string())?;
    bench.baseline.save(ckpt.path()).map_err(|e| e.to_string())?;
    let model = SegModel::load(ckpt.path()).map_err(|e| e.to_string())?;
    let spec = PerturbationSpec::nontarget_to_mud(1.0);
    let plan = EditPlan {
        stages: vec![
            EditStage { image_id: "C".into(), spec: spec.clone(), rewrite: RewriteConfig::with_steps(50) },
            EditStage {
                image_id: "D".into(),
                spec,
                rewrite: RewriteConfig { lr: 3e38, ..RewriteConfig::with_steps(50) },
            },
        ],
    };
    let failure = match edit_model(&model, &plan, &bench.dataset) {
        Ok(_) => return Err("injected failure did not abort".into()),
        Err(f) => f,
    };
    if !matches!(failure.error, Error::RewriteAborted { .. }) {
        return Err(format!("unexpected error {}", failure.error));
    }
    let after = tempfile::tempdir().map_err(|e| e.to_string())?;
    model.save(after.path()).map_err(|e| e.to_string())?;
    let mut files = 0;
    for entry in std::fs::read_dir(ckpt.path()).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = std::fs::read(ckpt.path().join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(after.path().join(&name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} changed after the aborted edit", name.to_string_lossy()));
        }
        files += 1;
    }
    Ok(format!(
        "{} run files identical across fresh reruns; aborted 2-stage edit left all {files} checkpoint files bit-exact",
        first.files.len()
    ))
}

fn locality(bench: &Bench, runs: &[&RunSummary]) -> Check {
    let base = bench.baseline.named_parameters();
    let mut models = 0;
    let mut unchanged = Vec::new();
    for s in runs {
        for row in s.rows.iter().skip(1) {
            let dir = bench.out.path().join(&s.name).join("rows").join(slug(&row.label)).join("model");
            let edited = SegModel::load(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let mut touched = false;
            for ((name, a), (_, b)) in base.iter().zip(edited.named_parameters()) {
                let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                if name.starts_with("output.") {
                    touched |= !same;
                } else if !same {
                    return Err(format!("{} row {}: {name} changed", s.name, row.label));
                }
            }
            if !touched {
                unchanged.push(format!("{}/{}", s.name, row.label));
            }
            models += 1;
        }
    }
    Ok(format!(
        "{models} edited checkpoints match the baseline outside the output convs; {} kept the baseline weights {unchanged:?}",
        unchanged.len()
    ))
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn soft(texture: &RunSummary, simultaneous: &RunSummary) -> Check {
    let p0 = precision(texture, "None")?;
    let fmt = |s: &RunSummary| -> Result<String, String> {
        let cells: Result<Vec<String>, String> =
            TRAIN_IDS.iter().map(|id| Ok(format!("{id} {:+.3}", precision(s, id)? - p0))).collect();
        Ok(cells?.join(" "))
    };
    let flags: Vec<&String> = texture.flags.iter().chain(&simultaneous.flags).collect();
    Ok(format!(
        "texture dP {}; simultaneous dP {}; {} flagged{}",
        fmt(texture)?,
        fmt(simultaneous)?,
        flags.len(),
        if flags.is_empty() { String::new() } else { format!(": {flags:?}") }
    ))
}

fn report(results: &mut Vec<(usize, bool)>, n: usize, name: &str, check: Check) {
    let (ok, msg) = match check {
        Ok(m) => (true, m),
        Err(m) => (false, m),
    };
    say(&format!("[{}] {n:>2} {name}: {msg}", if ok { "PASS" } else { "FAIL" }));
    results.push((n, ok));
}

fn config(name: &str, kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::new(name, kind)
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient correctness", gradients());
    report(&mut results, 2, "metric oracle", timed(10.0, metric_oracle));

    let base_cfg = config("baseline", ExperimentKind::Baseline);
    let cache = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let dataset = obtain_dataset(&base_cfg.dataset, Some(cache.path())).unwrap();
    let (baseline, _) = obtain_baseline(&base_cfg, &dataset, Some(cache.path())).unwrap();
    say(&format!("        baseline trained in {:.0}s, hash {}", t.elapsed().as_secs_f64(), &baseline.parameter_hash()[..16]));
    report(&mut results, 3, "perturbation accounting", perturbation_accounting(&dataset));

    let bench = Bench { cache, out: tempfile::tempdir().unwrap(), dataset, baseline };
    let outcome = |c: &ExperimentConfig| bench.run(c);

    let probe_run = outcome(&config("probe", ExperimentKind::Probe));
    report(&mut results, 4, "confusion probe", probe_run.as_ref().map_err(Clone::clone).and_then(|(s, _)| probe(s)));

    let single_cfg = config("nontarget-single", ExperimentKind::EditSingle);
    let single = outcome(&single_cfg);
    let dir = bench.out.path().join(&single_cfg.name);
    report(
        &mut results,
        5,
        "rewrite convergence",
        single.as_ref().map_err(Clone::clone).and_then(|(_, secs)| convergence(&dir, *secs)),
    );
    report(
        &mut results,
        6,
        "single-edit precision",
        single.as_ref().map_err(Clone::clone).and_then(|(s, secs)| single_edits(s, *secs)),
    );

    let percent_run = outcome(&config("nontarget-percent", ExperimentKind::EditPercent));
    report(&mut results, 7, "percent trend", percent_run.as_ref().map_err(Clone::clone).and_then(|(s, _)| percent(s)));

    let mut seq_cfg = config("nontarget-sequence", ExperimentKind::EditSequence);
    seq_cfg.edit.sequences = vec![vec!["A".into(), "B".into(), "C".into()]];
    let seq_run = outcome(&seq_cfg);
    let seq_check = match (&seq_run, &single) {
        (Ok((s, _)), Ok((c, _))) => sequence(s, c),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report(&mut results, 8, "sequence equals last", seq_check);

    let map_run = outcome(&config("sequential-mapping", ExperimentKind::EditSequentialMapping));
    report(&mut results, 9, "mapping correspondence", map_run.as_ref().map_err(Clone::clone).and_then(|(s, _)| mapping(s)));

    let mut det_cfg = config("determinism", ExperimentKind::EditSingle);
    det_cfg.edit.images = vec!["C".into()];
    let det_check = outcome(&det_cfg).and_then(|(s, _)| determinism(&bench, &det_cfg, &s));
    report(&mut results, 10, "determinism and rollback", det_check);

    let runs: Vec<&RunSummary> = [&single, &percent_run, &seq_run, &map_run]
        .iter()
        .filter_map(|r| r.as_ref().ok().map(|(s, _)| s))
        .collect();
    let loc = if runs.len() == 4 { locality(&bench, &runs) } else { Err("an edit run failed".into()) };
    report(&mut results, 11, "edit locality", loc);

    let mut texture_cfg = config("texture-single", ExperimentKind::EditSingle);
    texture_cfg.edit.spec = texture_cfg.edit.texture.clone();
    let texture = outcome(&texture_cfg);
    let simultaneous = outcome(&config("simultaneous", ExperimentKind::EditSimultaneous));
    let soft_check = match (&texture, &simultaneous) {
        (Ok((t, _)), Ok((s, _))) => soft(t, s),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report(&mut results, 12, "soft report (texture, simultaneous)", soft_check);

    let red: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    say(&format!("{}/{} criteria pass", results.len() - red.len(), results.len()));
    assert!(red.is_empty(), "failing criteria: {red:?}");
}
