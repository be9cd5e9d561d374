//! Experiment runner: JSON configs in, reproducible artifact directories out.
//!
//! A run generates (or reuses) the dataset, trains (or reuses) the baseline,
//! applies the kind-specific edit rows, evaluates every model and writes
//! comparison tables that always start with the unedited `None` row.
//! `summary.json` lists a sha256 for every file written, which makes a
//! rerun without `force` a verification pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, predict_instances, MeanStd, MetricsReport};
use crate::perturb::{occlude_targets, PerturbationSpec, Selection};
use crate::rewrite::{edit_model, EditPlan, EditStage, RewriteConfig, StageRecord, DEFAULT_STEPS, LONG_STEPS};
use crate::segnet::{train, ModelConfig, SegModel, TrainConfig};
use crate::synthgen::{Dataset, GeneratorConfig, CLASS_CONFUSER, TRAIN_IDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Baseline,
    Probe,
    EditSingle,
    EditPercent,
    EditSequence,
    EditSimultaneous,
    EditSequentialMapping,
}

impl ExperimentKind {
    pub fn is_edit(self) -> bool {
        !matches!(self, ExperimentKind::Baseline | ExperimentKind::Probe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            seed: 7,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTargetKind {
    /// Validation and test images pooled.
    UnseenPool,
    /// The last edit image of each row, before and after the edit.
    PerEditImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub targets: Vec<EvalTargetKind>,
    pub threshold: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            targets: vec![EvalTargetKind::UnseenPool],
            threshold: 0.0,
        }
    }
}

/// Kind-specific edit parameters. Texture specs with an empty tiled source
/// take their texture from the row's edit image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSection {
    /// Edit images, one row each (edit-single, edit-simultaneous).
    pub images: Vec<String>,
    /// The image used by edit-percent and edit-sequential-mapping.
    pub image: String,
    /// Primary mapping.
    pub spec: PerturbationSpec,
    /// Target-texture mapping, combined with `spec` by the simultaneous and
    /// sequential-mapping kinds.
    pub texture: PerturbationSpec,
    /// Pixel fractions for edit-percent.
    pub fractions: Vec<f64>,
    /// Instance subsets for edit-percent, applied after the fractions.
    pub subsets: Vec<Selection>,
    /// Image orderings for edit-sequence.
    pub sequences: Vec<Vec<String>>,
    /// Also run `images` ordered by increasing and by decreasing
    /// single-edit precision (edit-sequence).
    pub order_by_single: bool,
    pub rewrite: RewriteConfig,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            images: TRAIN_IDS.iter().map(|s| s.to_string()).collect(),
            image: "C".into(),
            spec: PerturbationSpec::nontarget_to_mud(1.0),
            texture: PerturbationSpec::target_to_texture("", Selection::Fraction { fraction: 1.0 }),
            fractions: vec![0.01, 0.35, 1.0],
            subsets: Vec::new(),
            sequences: vec![
                vec!["A".into(), "B".into()],
                vec!["A".into(), "B".into(), "C".into()],
            ],
            order_by_single: false,
            rewrite: RewriteConfig::with_steps(DEFAULT_STEPS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    /// Master seed; seeds the pixel selection of partial perturbations.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn new(name: &str, kind: ExperimentKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            seed: 0,
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            edit: EditSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    /// Sets every edit stage to the 20k-step schedule.
    pub fn use_long_steps(&mut self) {
        self.edit.rewrite.steps = LONG_STEPS;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, reason: &str| {
            Err(Error::Config {
                path: path.into(),
                reason: reason.into(),
            })
        };
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return cfg("name", "must be non-empty and use only [A-Za-z0-9_-]");
        }
        self.dataset.generator.validate()?;
        self.model.validate()?;
        if !(self.eval.threshold >= 0.0 && self.eval.threshold < 1.0) {
            return cfg("eval.threshold", "must lie in [0, 1)");
        }
        if self.eval.targets.is_empty() {
            return cfg("eval.targets", "at least one evaluation target is required");
        }
        if !self.kind.is_edit() {
            return Ok(());
        }
        if self.edit.rewrite.steps == 0 {
            return cfg("edit.rewrite.steps", "must be at least 1");
        }
        if !(self.edit.rewrite.lr > 0.0 && self.edit.rewrite.lr.is_finite()) {
            return cfg("edit.rewrite.lr", "must be positive and finite");
        }
        let known = |id: &String| TRAIN_IDS.contains(&id.as_str());
        match self.kind {
            ExperimentKind::EditSingle | ExperimentKind::EditSimultaneous => {
                if self.edit.images.is_empty() {
                    return cfg("edit.images", "at least one edit image is required");
                }
                if let Some(i) = self.edit.images.iter().position(|id| !known(id)) {
                    return cfg(&format!("edit.images[{i}]"), "not a training image id");
                }
            }
            ExperimentKind::EditPercent => {
                if !known(&self.edit.image) {
                    return cfg("edit.image", "not a training image id");
                }
                if self.edit.fractions.is_empty() && self.edit.subsets.is_empty() {
                    return cfg("edit.fractions", "need at least one fraction or subset");
                }
                if let Some(i) = self.edit.fractions.iter().position(|f| !(0.0..=1.0).contains(f)) {
                    return cfg(&format!("edit.fractions[{i}]"), "must lie in [0, 1]");
                }
            }
            ExperimentKind::EditSequence => {
                if self.edit.sequences.is_empty() && !self.edit.order_by_single {
                    return cfg("edit.sequences", "need at least one sequence");
                }
                for (i, seq) in self.edit.sequences.iter().enumerate() {
                    if seq.is_empty() {
                        return cfg(&format!("edit.sequences[{i}]"), "empty sequence");
                    }
                    if let Some(j) = seq.iter().position(|id| !known(id)) {
                        return cfg(&format!("edit.sequences[{i}][{j}]"), "not a training image id");
                    }
                }
                if self.edit.order_by_single && self.edit.images.is_empty() {
                    return cfg("edit.images", "ordering by single-edit precision needs images");
                }
            }
            ExperimentKind::EditSequentialMapping => {
                if !known(&self.edit.image) {
                    return cfg("edit.image", "not a training image id");
                }
            }
            ExperimentKind::Baseline | ExperimentKind::Probe => {}
        }
        self.edit.spec.validate()?;
        if matches!(
            self.kind,
            ExperimentKind::EditSimultaneous | ExperimentKind::EditSequentialMapping
        ) {
            self.edit.texture.validate()?;
            PerturbationSpec::compose(vec![self.edit.spec.clone(), self.edit.texture.clone()])
                .validate()
                .map_err(|e| Error::Config {
                    path: "edit.texture".into(),
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    fn stage(&self, image: &str, spec: &PerturbationSpec) -> EditStage {
        EditStage {
            image_id: image.to_string(),
            spec: spec.resolve_source(image),
            rewrite: self.edit.rewrite.clone(),
        }
    }

    /// Table rows and their plans, in table order. Edit-sequence rows that
    /// depend on single-edit results are added by `run`.
    pub fn rows(&self) -> Vec<EditRow> {
        let e = &self.edit;
        let row = |label: String, stages: Vec<EditStage>| EditRow {
            label,
            plan: EditPlan { stages },
        };
        match self.kind {
            ExperimentKind::Baseline | ExperimentKind::Probe => Vec::new(),
            ExperimentKind::EditSingle => e
                .images
                .iter()
                .map(|id| row(id.clone(), vec![self.stage(id, &e.spec)]))
                .collect(),
            ExperimentKind::EditPercent => {
                let mut rows: Vec<EditRow> = e
                    .fractions
                    .iter()
                    .map(|&f| {
                        let spec = e.spec.with_selection(Selection::Fraction { fraction: f }, self.seed);
                        row(format!("{}%", f * 100.0), vec![self.stage(&e.image, &spec)])
                    })
                    .collect();
                for sel in &e.subsets {
                    let spec = e.spec.with_selection(sel.clone(), self.seed);
                    rows.push(row(spec.label(), vec![self.stage(&e.image, &spec)]));
                }
                rows
            }
            ExperimentKind::EditSequence => e
                .sequences
                .iter()
                .map(|seq| {
                    row(
                        seq.join(","),
                        seq.iter().map(|id| self.stage(id, &e.spec)).collect(),
                    )
                })
                .collect(),
            ExperimentKind::EditSimultaneous => {
                let sim = PerturbationSpec::compose(vec![e.spec.clone(), e.texture.clone()]);
                e.images
                    .iter()
                    .map(|id| row(id.clone(), vec![self.stage(id, &sim)]))
                    .collect()
            }
            ExperimentKind::EditSequentialMapping => {
                let (no, ar) = (&e.spec, &e.texture);
                let (ln, la) = (no.label(), ar.label());
                vec![
                    row(ln.clone(), vec![self.stage(&e.image, no)]),
                    row(la.clone(), vec![self.stage(&e.image, ar)]),
                    row(
                        format!("{ln},{la}"),
                        vec![self.stage(&e.image, no), self.stage(&e.image, ar)],
                    ),
                    row(
                        format!("{la},{ln}"),
                        vec![self.stage(&e.image, ar), self.stage(&e.image, no)],
                    ),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRow {
    pub label: String,
    pub plan: EditPlan,
}

/// Occlusion-probe outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub image_id: String,
    pub predicted_instances: usize,
    /// Predicted instances overlapping at least one confuser pixel.
    pub confuser_false_positives: usize,
}

/// Hides every target and counts the detections left on confusers.
pub fn occlusion_probe(model: &SegModel, sample: &crate::synthgen::ImageSample, threshold: f32) -> Result<ProbeRow> {
    let occluded = occlude_targets(sample, sample.mud_color())?;
    let preds = predict_instances(model, &occluded.image, threshold)?;
    let on_confuser = preds
        .iter()
        .filter(|m| {
            m.pixels
                .iter()
                .zip(&sample.class_map)
                .any(|(&p, &c)| p && c == CLASS_CONFUSER)
        })
        .count();
    Ok(ProbeRow {
        image_id: sample.id.clone(),
        predicted_instances: preds.len(),
        confuser_false_positives: on_confuser,
    })
}

/// Aggregate metrics of one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub model_hash: String,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub iou: Option<MeanStd>,
    pub matched: usize,
    pub gt_total: usize,
    /// Per-edit-image evaluation: (image, original, edited).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_image: Option<EditImageEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditImageEval {
    pub image_id: String,
    pub original: Option<[MeanStd; 3]>,
    pub edited: Option<[MeanStd; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub dataset_seed: u64,
    pub baseline_hash: String,
    pub rows: Vec<RowSummary>,
    #[serde(default)]
    pub probe: Vec<ProbeRow>,
    /// Outcomes the method is not expected to produce.
    pub flags: Vec<String>,
    /// Rows whose edit aborted, with the reason.
    pub failures: Vec<(String, String)>,
    /// sha256 of every other file in the run directory.
    pub files: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn precision(&self, label: &str) -> Option<f64> {
        self.row(label).and_then(|r| r.precision).map(|m| m.mean)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Directory for datasets and baselines shared between runs.
    pub cache: Option<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Records the hashes of every file below `root/rel`.
fn hash_tree(root: &Path, rel: &str, files: &mut BTreeMap<String, String>) -> Result<()> {
    let dir = root.join(rel);
    let mut entries: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = format!("{rel}/{}", entry.file_name().to_string_lossy());
        let path = entry.path();
        if path.is_dir() {
            hash_tree(root, &name, files)?;
        } else {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.insert(name, sha256_hex(&bytes));
        }
    }
    Ok(())
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn stage_err(stage: &str, e: impl std::fmt::Display) -> Error {
    Error::Stage {
        stage: stage.into(),
        reason: e.to_string(),
    }
}

/// Dataset for `section`: loaded from the cache when present there.
pub fn obtain_dataset(section: &DatasetSection, cache: Option<&Path>) -> Result<Dataset> {
    let Some(cache) = cache else {
        return Dataset::generate(section.seed, &section.generator);
    };
    let key = sha256_hex(&to_json(section));
    let dir = cache.join(format!("dataset-{}", &key[..16]));
    if dir.join("manifest.json").exists() {
        let ds = Dataset::load(&dir)?;
        if ds.manifest.seed == section.seed && ds.manifest.config == section.generator {
            return Ok(ds);
        }
    }
    let ds = Dataset::generate(section.seed, &section.generator)?;
    ds.save(&dir)?;
    Ok(ds)
}

/// Trained baseline and its training report for `config`, cached by the
/// hash of everything that determines it.
pub fn obtain_baseline(config: &ExperimentConfig, dataset: &Dataset, cache: Option<&Path>) -> Result<(SegModel, Option<Vec<f64>>)> {
    let key_src = serde_json::json!({
        "dataset": config.dataset,
        "model": config.model,
        "train": config.train,
    });
    let key = sha256_hex(key_src.to_string().as_bytes());
    let dir = cache.map(|c| c.join(format!("baseline-{}", &key[..16])));
    if let Some(dir) = &dir {
        if dir.join("model.json").exists() {
            let model = SegModel::load(dir)?;
            let curve_path = dir.join("loss_curve.json");
            let curve = fs::read_to_string(&curve_path)
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok());
            return Ok((model, curve));
        }
    }
    let mut model = SegModel::new(config.model.clone())?;
    model.provenance.dataset_seed = Some(config.dataset.seed);
    let report = train(&mut model, &dataset.train(), &config.train).map_err(|e| stage_err("train", e))?;
    if let Some(dir) = &dir {
        model.save(dir)?;
        let p = dir.join("loss_curve.json");
        fs::write(&p, to_json(&report.loss_curve)).map_err(|e| Error::io(&p, e))?;
    }
    Ok((model, Some(report.loss_curve)))
}

fn summarize(label: &str, model: &SegModel, report: &MetricsReport) -> RowSummary {
    RowSummary {
        label: label.to_string(),
        model_hash: model.parameter_hash(),
        precision: report.aggregates.map(|a| a.precision),
        recall: report.aggregates.map(|a| a.recall),
        iou: report.aggregates.map(|a| a.iou),
        matched: report.counts.matched,
        gt_total: report.counts.gt_total,
        edit_image: None,
    }
}

fn triple(report: &MetricsReport) -> Option<[MeanStd; 3]> {
    report.aggregates.map(|a| [a.precision, a.recall, a.iou])
}

/// Checks a finished run directory against its summary. Returns the
/// summary when every recorded hash still matches.
pub fn verify_run(out: &Path, config: &ExperimentConfig) -> Result<Option<RunSummary>> {
    let path = out.join("summary.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if summary.config_hash != config.hash() {
        return Err(Error::Config {
            path: out.display().to_string(),
            reason: "directory holds a different experiment; rerun with --force to replace it".into(),
        });
    }
    for (rel, hash) in &summary.files {
        let p = out.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if &sha256_hex(&bytes) != hash {
            return Err(stage_err(
                "verify",
                format!("{} changed since the run; rerun with --force", p.display()),
            ));
        }
    }
    Ok(Some(summary))
}

/// Executes one experiment into `out`.
pub fn run(config: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    if !opts.force {
        if let Some(summary) = verify_run(out, config)? {
            return Ok(summary);
        }
    } else if out.join("summary.json").exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = BTreeMap::new();
    write_file(out, "config.json", config.canonical_json().as_bytes(), &mut files)?;

    let cache = opts.cache.as_deref();
    let dataset = obtain_dataset(&config.dataset, cache).map_err(|e| stage_err("gen-data", e))?;
    dataset.save(&out.join("dataset"))?;
    hash_tree(out, "dataset", &mut files)?;

    let (baseline, curve) = obtain_baseline(config, &dataset, cache)?;
    baseline.save(&out.join("baseline"))?;
    hash_tree(out, "baseline", &mut files)?;
    if let Some(curve) = &curve {
        write_file(out, "baseline_loss_curve.json", &to_json(curve), &mut files)?;
    }

    let threshold = config.eval.threshold;
    let unseen = dataset.unseen();
    let mut summary = RunSummary {
        name: config.name.clone(),
        kind: config.kind,
        config_hash: config.hash(),
        dataset_seed: config.dataset.seed,
        baseline_hash: baseline.parameter_hash(),
        rows: Vec::new(),
        probe: Vec::new(),
        flags: Vec::new(),
        failures: Vec::new(),
        files: BTreeMap::new(),
    };

    let prov = |model: &SegModel| ReportProvenance {
        config_hash: summary.config_hash.clone(),
        dataset_seed: config.dataset.seed,
        baseline_hash: summary.baseline_hash.clone(),
        model_hash: model.parameter_hash(),
    };
    let base_prov = prov(&baseline);
    let base_report = evaluate(&baseline, &unseen, threshold)?;
    write_report(out, "rows/None/unseen", &base_report, &base_prov, &mut files)?;
    summary.rows.push(summarize("None", &baseline, &base_report));

    if config.kind == ExperimentKind::Probe {
        for s in dataset.train() {
            summary.probe.push(occlusion_probe(&baseline, s, threshold)?);
        }
        write_file(out, "probe.md", probe_markdown(&summary.probe).as_bytes(), &mut files)?;
    }

    let mut rows = config.rows();
    if config.kind == ExperimentKind::EditSequence && config.edit.order_by_single {
        let mut singles = Vec::new();
        for id in &config.edit.images {
            let plan = EditPlan {
                stages: vec![config.stage(id, &config.edit.spec)],
            };
            let outcome = edit_model(&baseline, &plan, &dataset).map_err(|e| stage_err("edit", e))?;
            let p = evaluate(&outcome.model, &unseen, threshold)?.precision().unwrap_or(0.0);
            singles.push((id.clone(), p));
        }
        singles.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let inc: Vec<String> = singles.iter().map(|s| s.0.clone()).collect();
        let dec: Vec<String> = inc.iter().rev().cloned().collect();
        for (tag, order) in [("increasing", inc), ("decreasing", dec)] {
            rows.push(EditRow {
                label: format!("{tag}: {}", order.join(",")),
                plan: EditPlan {
                    stages: order.iter().map(|id| config.stage(id, &config.edit.spec)).collect(),
                },
            });
        }
    }

    let base_precision = base_report.precision();
    for row in rows {
        let dir = format!("rows/{}", slug(&row.label));
        let outcome = match edit_model(&baseline, &row.plan, &dataset) {
            Ok(o) => o,
            Err(failure) => {
                write_file(out, &format!("{dir}/stages.json"), &to_json(&failure.stages), &mut files)?;
                summary.failures.push((row.label.clone(), failure.error.to_string()));
                continue;
            }
        };
        outcome.model.save(&out.join(&dir).join("model"))?;
        hash_tree(out, &format!("{dir}/model"), &mut files)?;
        write_file(out, &format!("{dir}/stages.json"), &to_json(&outcome.stages), &mut files)?;
        let edited_prov = prov(&outcome.model);
        let report = evaluate(&outcome.model, &unseen, threshold)?;
        write_report(out, &format!("{dir}/unseen"), &report, &edited_prov, &mut files)?;
        let mut rs = summarize(&row.label, &outcome.model, &report);
        if config.eval.targets.contains(&EvalTargetKind::PerEditImage) {
            let last = &row.plan.stages.last().expect("validated plan").image_id;
            let sample = dataset.require(last)?;
            let orig = evaluate(&baseline, &[sample], threshold)?;
            let edited = evaluate(&outcome.model, &[sample], threshold)?;
            write_report(out, &format!("{dir}/edit_image_original"), &orig, &base_prov, &mut files)?;
            write_report(out, &format!("{dir}/edit_image_edited"), &edited, &edited_prov, &mut files)?;
            rs.edit_image = Some(EditImageEval {
                image_id: last.clone(),
                original: triple(&orig),
                edited: triple(&edited),
            });
        }
        let texture_like = row.plan.stages.iter().any(|s| s.spec.substitutes_texture());
        if let (true, Some(p), Some(b)) = (texture_like, report.precision(), base_precision) {
            if p > b {
                summary.flags.push(format!(
                    "{}: texture or simultaneous edit raised precision {b:.4} -> {p:.4}",
                    row.label
                ));
            }
        }
        summary.rows.push(rs);
    }

    write_file(out, "table.md", results_markdown(&summary).as_bytes(), &mut files)?;
    write_file(out, "table.csv", results_csv(&summary).as_bytes(), &mut files)?;
    if config.eval.targets.contains(&EvalTargetKind::PerEditImage) {
        write_file(out, "edit_image_table.md", edit_image_markdown(&summary).as_bytes(), &mut files)?;
    }
    summary.files = files;
    let path = out.join("summary.json");
    fs::write(&path, to_json(&summary)).map_err(|e| Error::io(&path, e))?;
    if !summary.failures.is_empty() {
        let list: Vec<String> = summary.failures.iter().map(|(l, r)| format!("{l}: {r}")).collect();
        return Err(stage_err("edit", list.join("; ")));
    }
    Ok(summary)
}

/// Written next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub config_hash: String,
    pub dataset_seed: u64,
    pub baseline_hash: String,
    pub model_hash: String,
}

fn write_report(
    out: &Path,
    rel: &str,
    report: &MetricsReport,
    prov: &ReportProvenance,
    files: &mut BTreeMap<String, String>,
) -> Result<()> {
    report.write(&out.join(rel))?;
    let p = out.join(rel).join("provenance.json");
    fs::write(&p, to_json(prov)).map_err(|e| Error::io(&p, e))?;
    hash_tree(out, rel, files)
}

fn fmt_ms(v: Option<MeanStd>, bold: bool) -> String {
    match v {
        Some(m) if bold => format!("**{m}**"),
        Some(m) => m.to_string(),
        None => "n/a".into(),
    }
}

/// Markdown table with the best mean of each column in bold.
pub fn results_markdown(summary: &RunSummary) -> String {
    let mut out = format!("# {}\n\n", summary.name);
    let _ = writeln!(out, "config {}  baseline {}\n", summary.config_hash, summary.baseline_hash);
    out.push_str("| Edit | Precision | Recall | IoU | Matched |\n|---|---|---|---|---|\n");
    let best = |f: fn(&RowSummary) -> Option<MeanStd>| {
        summary
            .rows
            .iter()
            .filter_map(|r| f(r).map(|m| m.mean))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (bp, br, bi) = (best(|r| r.precision), best(|r| r.recall), best(|r| r.iou));
    for r in &summary.rows {
        let is = |v: Option<MeanStd>, b: f64| v.is_some_and(|m| m.mean == b);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {}/{} |",
            r.label,
            fmt_ms(r.precision, is(r.precision, bp)),
            fmt_ms(r.recall, is(r.recall, br)),
            fmt_ms(r.iou, is(r.iou, bi)),
            r.matched,
            r.gt_total
        );
    }
    for (label, reason) in &summary.failures {
        let _ = writeln!(out, "| {label} | failed: {reason} | | | |");
    }
    if !summary.flags.is_empty() {
        out.push_str("\nFlags:\n");
        for f in &summary.flags {
            let _ = writeln!(out, "- {f}");
        }
    }
    out
}

pub fn results_csv(summary: &RunSummary) -> String {
    let mut out = String::from(
        "edit,precision_mean,precision_std,recall_mean,recall_std,iou_mean,iou_std,matched,gt_total,model_hash\n",
    );
    let c = |v: Option<MeanStd>| match v {
        Some(m) => format!("{:.6},{:.6}", m.mean, m.std),
        None => ",".into(),
    };
    for r in &summary.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            c(r.precision),
            c(r.recall),
            c(r.iou),
            r.matched,
            r.gt_total,
            r.model_hash
        );
    }
    out
}

/// Original and edited metrics on each row's own edit image.
pub fn edit_image_markdown(summary: &RunSummary) -> String {
    let mut out = String::from(
        "| Edit | Image | Precision original | Precision edited | Recall original | Recall edited | IoU original | IoU edited |\n|---|---|---|---|---|---|---|---|\n",
    );
    for r in &summary.rows {
        let Some(e) = &r.edit_image else { continue };
        let _ = write!(out, "| {} | {} |", r.label, e.image_id);
        for k in 0..3 {
            let (o, d) = (e.original.map(|t| t[k]), e.edited.map(|t| t[k]));
            let (bo, bd) = match (o, d) {
                (Some(a), Some(b)) => (a.mean > b.mean, b.mean > a.mean),
                _ => (false, false),
            };
            let _ = write!(out, " {} | {} |", fmt_ms(o, bo), fmt_ms(d, bd));
        }
        out.push('\n');
    }
    out
}

pub fn probe_markdown(rows: &[ProbeRow]) -> String {
    let mut out = String::from("| Image | Predicted instances | On confusers |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(out, "| {} | {} | {} |", r.image_id, r.predicted_instances, r.confuser_false_positives);
    }
    out
}

/// Outcome of one experiment inside a grid.
#[derive(Debug)]
pub struct GridEntry {
    pub name: String,
    pub result: Result<RunSummary>,
}

#[derive(Debug)]
pub struct GridReport {
    pub entries: Vec<GridEntry>,
}

impl GridReport {
    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.result.is_ok())
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match &e.result {
                Ok(s) => {
                    out.push_str(&results_markdown(s));
                    if !s.probe.is_empty() {
                        out.push('\n');
                        out.push_str(&probe_markdown(&s.probe));
                    }
                }
                Err(err) => {
                    let _ = writeln!(out, "# {}\n\nfailed: {err}", e.name);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every config under `out/<name>`, sharing datasets and baselines
/// through `out/cache`. A failing experiment does not stop the others.
pub fn grid(configs: &[ExperimentConfig], out: &Path, force: bool) -> Result<GridReport> {
    if configs.is_empty() {
        return Err(Error::Config {
            path: "grid".into(),
            reason: "no experiments given".into(),
        });
    }
    let mut names = std::collections::BTreeSet::new();
    for (i, c) in configs.iter().enumerate() {
        c.validate().map_err(|e| Error::Config {
            path: format!("grid[{i}]"),
            reason: e.to_string(),
        })?;
        if !names.insert(c.name.clone()) {
            return Err(Error::Config {
                path: format!("grid[{i}].name"),
                reason: format!("duplicate experiment name `{}`", c.name),
            });
        }
    }
    let opts = RunOptions {
        force,
        cache: Some(out.join("cache")),
    };
    let entries = configs
        .iter()
        .map(|c| GridEntry {
            name: c.name.clone(),
            result: run(c, &out.join(&c.name), &opts),
        })
        .collect();
    let report = GridReport { entries };
    let path = out.join("grid.md");
    fs::write(&path, report.to_markdown()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// The experiment grid of the single, percent, sequence, texture,
/// simultaneous and sequential-mapping tables, plus the probe.
pub fn full_grid() -> Vec<ExperimentConfig> {
    use ExperimentKind::*;
    let mut probe = ExperimentConfig::new("probe", Probe);
    probe.eval.targets = vec![EvalTargetKind::UnseenPool];
    let mut single = ExperimentConfig::new("nontarget-single", EditSingle);
    single.eval.targets = vec![EvalTargetKind::UnseenPool, EvalTargetKind::PerEditImage];
    let percent = ExperimentConfig::new("nontarget-percent", EditPercent);
    let mut sequence = ExperimentConfig::new("nontarget-sequence", EditSequence);
    sequence.edit.order_by_single = true;
    let mut texture = ExperimentConfig::new("texture-single", EditSingle);
    texture.edit.spec = texture.edit.texture.clone();
    let mut texture_percent = ExperimentConfig::new("texture-percent", EditPercent);
    texture_percent.edit.image = "D".into();
    texture_percent.edit.spec = texture_percent.edit.texture.clone();
    texture_percent.edit.fractions = vec![1.0];
    texture_percent.edit.subsets = vec![
        Selection::OneMudFilled,
        Selection::InstanceFraction { fraction: 0.5 },
    ];
    let simultaneous = ExperimentConfig::new("simultaneous", EditSimultaneous);
    let mapping = ExperimentConfig::new("sequential-mapping", EditSequentialMapping);
    vec![probe, single, percent, sequence, texture, texture_percent, simultaneous, mapping]
}

/// Side-by-side comparison of two reports over the same images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target: Vec<String>,
    /// (metric, A, B, B - A)
    pub rows: Vec<(String, Option<MeanStd>, Option<MeanStd>, Option<f64>)>,
}

pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison> {
    if a.target != b.target {
        return Err(Error::invalid(format!(
            "reports cover different images: {:?} vs {:?}",
            a.target.image_ids, b.target.image_ids
        )));
    }
    let pick = |r: &MetricsReport, k: usize| triple(r).map(|t| t[k]);
    let rows = ["Precision", "Recall", "IoU"]
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (x, y) = (pick(a, k), pick(b, k));
            let delta = match (x, y) {
                (Some(x), Some(y)) => Some(y.mean - x.mean),
                _ => None,
            };
            (name.to_string(), x, y, delta)
        })
        .collect();
    Ok(Comparison {
        target: a.target.image_ids.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_markdown(&self, label_a: &str, label_b: &str) -> String {
        let mut out = format!(
            "Images: {}\n\n| Metric | {label_a} | {label_b} | Delta |\n|---|---|---|---|\n",
            self.target.join(", ")
        );
        for (name, x, y, d) in &self.rows {
            let (bx, by) = match d {
                Some(d) => (*d < 0.0, *d > 0.0),
                None => (false, false),
            };
            let delta = d.map(|d| format!("{d:+.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "| {name} | {} | {} | {delta} |", fmt_ms(*x, bx), fmt_ms(*y, by));
        }
        out
    }
}

/// Reads `report.json` from a file path or a directory containing one.
pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&file, e))
}

/// Reads one config, a JSON list of configs, or `{"experiments": [...]}`.
pub fn load_grid(path: &Path) -> Result<Vec<ExperimentConfig>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum GridFile {
        List(Vec<ExperimentConfig>),
        Wrapped { experiments: Vec<ExperimentConfig> },
        One(Box<ExperimentConfig>),
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: GridFile = serde_json::from_str(&text).map_err(|e| Error::Config {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(match parsed {
        GridFile::List(v) | GridFile::Wrapped { experiments: v } => v,
        GridFile::One(c) => vec![*c],
    })
}

/// Records of a finished row, for inspection of loss traces.
pub fn load_stages(run_dir: &Path, label: &str) -> Result<Vec<StageRecord>> {
    let path = run_dir.join("rows").join(slug(label)).join("stages.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

impl Error {
    /// Process exit code: 1 for validation errors, 2 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) | Error::Config { .. } => 1,
            _ => 2,
        }
    }
}
