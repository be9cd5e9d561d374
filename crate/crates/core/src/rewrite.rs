//! Key→value rewriting of the segmenter's output convolutions.
//!
//! For an edit image and a perturbation of it, the keys are the inputs of
//! each output conv on the original image and the values are that conv's
//! outputs on the perturbed image. Rewriting runs plain gradient descent on
//! the L1 distance between `conv(keys, w)` and the values, with respect to
//! that layer's weights (and optionally bias), keys and values held fixed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv2d_backward_params, conv2d_forward, l1_loss, sgd_step_in_place, Tensor};
use crate::perturb::{apply, PerturbationSpec, PerturbedImage, TextureSource};
use crate::segnet::{ConvParams, LayerHandle, SegModel};
use crate::synthgen::{Dataset, ImageSample};

pub const LONG_STEPS: usize = 20_000;
pub const DEFAULT_STEPS: usize = 2_000;
pub const DEFAULT_LR: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteConfig {
    pub steps: usize,
    pub lr: f32,
    /// Optional per-layer H_s×W_s {0,1} masks restricting the objective.
    pub masks: Option<Vec<Tensor01>>,
    /// Layers to edit; every output conv when absent.
    pub layers: Option<Vec<LayerHandle>>,
    pub edit_bias: bool,
    pub optimizer: Optimizer,
}

/// Update rule for the rewrite descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `w -= lr * g`.
    Sgd,
    /// Adam with the usual moment decay rates.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut Tensor, grads: &Tensor, lr: f32, t: i32, opt: (f32, f32, f32)) {
        let (b1, b2, eps) = opt;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (((p, &g), m), v) in params
            .data_mut()
            .iter_mut()
            .zip(grads.data())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

impl Default for RewriteConfig {
    fn default() -> Self {
        Self {
            steps: LONG_STEPS,
            lr: DEFAULT_LR,
            masks: None,
            layers: None,
            edit_bias: true,
            optimizer: Optimizer::adam(),
        }
    }
}

/// Serializable {0,1} mask over one layer's spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor01 {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Tensor01 {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
        )
    }
}

impl RewriteConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn resolved_layers(&self, model: &SegModel) -> Vec<LayerHandle> {
        self.layers.clone().unwrap_or_else(|| model.handles())
    }

    pub fn validate(&self, model: &SegModel) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config {
                path: "rewrite.steps".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config {
                path: "rewrite.lr".into(),
                reason: "must be positive and finite".into(),
            });
        }
        for h in self.resolved_layers(model) {
            model.layer(h)?;
        }
        if let Some(masks) = &self.masks {
            if masks.len() != model.scales() {
                return Err(Error::Config {
                    path: "rewrite.masks".into(),
                    reason: format!("expected {} masks, got {}", model.scales(), masks.len()),
                });
            }
            if let Some(i) = masks.iter().position(|m| !m.bits.iter().any(|&b| b != 0)) {
                return Err(Error::Config {
                    path: format!("rewrite.masks[{i}]"),
                    reason: "mask selects no positions".into(),
                });
            }
        }
        Ok(())
    }
}

/// Where a key/value pair came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvProvenance {
    pub image_id: String,
    pub spec: Option<PerturbationSpec>,
    pub model_hash: String,
}

/// Per-layer keys k* and values v*.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub provenance: KvProvenance,
}

/// Keys from the original image, values from the perturbed one, both
/// under the model's current weights.
pub fn capture_kv(model: &SegModel, original: &ImageSample, perturbed: &PerturbedImage) -> Result<KvPair> {
    capture_kv_images(model, &original.id, &original.image, &perturbed.image, Some(perturbed.spec.clone()))
}

pub fn capture_kv_images(
    model: &SegModel,
    image_id: &str,
    original: &Tensor,
    perturbed: &Tensor,
    spec: Option<PerturbationSpec>,
) -> Result<KvPair> {
    if original.shape() != perturbed.shape() {
        return Err(Error::ShapeMismatch {
            op: "capture_kv",
            left: original.shape().to_vec(),
            right: perturbed.shape().to_vec(),
        });
    }
    let (_, orig) = model.forward_with_capture(original)?;
    let (_, pert) = model.forward_with_capture(perturbed)?;
    Ok(KvPair {
        keys: orig.keys,
        values: pert.values,
        provenance: KvProvenance {
            image_id: image_id.to_string(),
            spec,
            model_hash: model.parameter_hash(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: LayerHandle,
    /// L1 loss before each of the `steps` updates.
    pub losses: Vec<f64>,
    /// Loss of the installed weights: the lowest seen, including after the last update.
    pub final_loss: f64,
}

impl LayerTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }

    /// Sliding means over `[t, t + window)` for every start `t` that fits.
    pub fn windowed_means(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        if self.losses.len() < window {
            return Vec::new();
        }
        let mut sum: f64 = self.losses[..window].iter().sum();
        let mut out = vec![sum / window as f64];
        for t in window..self.losses.len() {
            sum += self.losses[t] - self.losses[t - window];
            out.push(sum / window as f64);
        }
        out
    }

    /// Largest increase between consecutive sliding-window means, computed
    /// exactly as `(loss[t + window] - loss[t]) / window`.
    pub fn max_window_increase(&self, window: usize) -> f64 {
        let window = window.max(1);
        (window..self.losses.len())
            .map(|t| (self.losses[t] - self.losses[t - window]) / window as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Rewrites one output conv in place; rolls back on a non-finite loss.
pub fn rewrite_layer(
    model: &mut SegModel,
    handle: LayerHandle,
    kv: &KvPair,
    cfg: &RewriteConfig,
) -> Result<LayerTrace> {
    cfg.validate(model)?;
    if !cfg.resolved_layers(model).contains(&handle) {
        return Err(Error::invalid(format!(
            "layer {} is not among the configured layers",
            handle.0
        )));
    }
    let s = handle.0;
    let key = kv
        .keys
        .get(s)
        .ok_or_else(|| Error::invalid(format!("kv pair lacks layer {s}")))?;
    let value = &kv.values[s];
    let mask = match &cfg.masks {
        Some(m) => Some(m[s].to_tensor()?),
        None => None,
    };
    let original = model.layer(handle)?.clone();
    match run_descent(model, handle, key, value, mask.as_ref(), cfg) {
        Ok(trace) => Ok(trace),
        Err(e) => {
            *model.layer_mut(handle)? = original;
            Err(e)
        }
    }
}

fn run_descent(
    model: &mut SegModel,
    handle: LayerHandle,
    key: &Tensor,
    value: &Tensor,
    mask: Option<&Tensor>,
    cfg: &RewriteConfig,
) -> Result<LayerTrace> {
    let mut losses = Vec::with_capacity(cfg.steps);
    let params = model.layer_mut(handle)?;
    if let Some(m) = mask {
        if m.shape() != &value.shape()[2..] {
            return Err(Error::ShapeMismatch {
                op: "rewrite mask",
                left: m.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
    }
    let mut adam_w = AdamState::new(params.weight.len());
    let mut adam_b = AdamState::new(params.bias.len());
    // L1 descent is not monotone; the lowest-loss iterate is installed
    let mut best: Option<(f64, ConvParams)> = None;
    for step in 0..cfg.steps {
        let pred = conv2d_forward(key, &params.weight, &params.bias, 1, 1)?;
        let (loss, grad) = l1_loss(&pred, value, mask)?;
        if !loss.is_finite() {
            return Err(Error::RewriteAborted {
                layer: handle.0,
                step,
                loss,
            });
        }
        losses.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params.clone()));
        }
        let (gw, gb) = conv2d_backward_params(key, &params.weight, &grad, 1, 1)?;
        match cfg.optimizer {
            Optimizer::Sgd => {
                sgd_step_in_place(&mut params.weight, &gw, cfg.lr)?;
                if cfg.edit_bias {
                    sgd_step_in_place(&mut params.bias, &gb, cfg.lr)?;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = step as i32 + 1;
                adam_w.step(&mut params.weight, &gw, cfg.lr, t, (beta1, beta2, eps));
                if cfg.edit_bias {
                    adam_b.step(&mut params.bias, &gb, cfg.lr, t, (beta1, beta2, eps));
                }
            }
        }
    }
    let pred = conv2d_forward(key, &params.weight, &params.bias, 1, 1)?;
    let (mut final_loss, _) = l1_loss(&pred, value, mask)?;
    if !final_loss.is_finite() || !params.weight.all_finite() || !params.bias.all_finite() {
        return Err(Error::RewriteAborted {
            layer: handle.0,
            step: cfg.steps,
            loss: final_loss,
        });
    }
    if let Some((loss, snapshot)) = best.filter(|(b, _)| *b < final_loss) {
        *params = snapshot;
        final_loss = loss;
    }
    Ok(LayerTrace {
        layer: handle,
        losses,
        final_loss,
    })
}

/// One stage of an edit plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditStage {
    pub image_id: String,
    pub spec: PerturbationSpec,
    #[serde(default)]
    pub rewrite: RewriteConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub stages: Vec<EditStage>,
}

impl EditPlan {
    pub fn single(image_id: &str, spec: PerturbationSpec, rewrite: RewriteConfig) -> Self {
        Self {
            stages: vec![EditStage {
                image_id: image_id.to_string(),
                spec,
                rewrite,
            }],
        }
    }

    /// The same spec applied with each image in turn.
    pub fn sequence(image_ids: &[&str], spec: &PerturbationSpec, rewrite: &RewriteConfig) -> Self {
        Self {
            stages: image_ids
                .iter()
                .map(|id| EditStage {
                    image_id: id.to_string(),
                    spec: spec.clone(),
                    rewrite: rewrite.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config {
                path: "plan.stages".into(),
                reason: "an edit plan needs at least one stage".into(),
            });
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if dataset.sample(&stage.image_id).is_none() {
                return Err(Error::Config {
                    path: format!("plan.stages[{i}].image_id"),
                    reason: format!("unknown image `{}`", stage.image_id),
                });
            }
            stage.spec.validate().map_err(|e| Error::Config {
                path: format!("plan.stages[{i}].spec"),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Audit record of one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub image_id: String,
    pub spec: PerturbationSpec,
    pub changed_pixels: usize,
    pub model_hash_before: String,
    pub model_hash_after: Option<String>,
    /// Capture was taken under the model state at the start of the stage.
    pub captured_under: String,
    pub traces: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub model: SegModel,
    pub stages: Vec<StageRecord>,
}

/// An aborted edit: the input model is untouched; completed and partial
/// stage records are kept.
#[derive(Debug)]
pub struct EditFailure {
    pub error: Error,
    pub stages: Vec<StageRecord>,
}

impl std::fmt::Display for EditFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "edit aborted after {} stage(s): {}", self.stages.len(), self.error)
    }
}

impl std::error::Error for EditFailure {}

impl From<EditFailure> for Error {
    fn from(f: EditFailure) -> Self {
        Error::Stage {
            stage: "edit".into(),
            reason: f.to_string(),
        }
    }
}

/// Executes every stage in order against a copy of `model`.
pub fn edit_model(
    model: &SegModel,
    plan: &EditPlan,
    dataset: &Dataset,
) -> std::result::Result<EditOutcome, EditFailure> {
    let fail = |error, stages| EditFailure { error, stages };
    if let Err(e) = plan.validate(dataset) {
        return Err(fail(e, Vec::new()));
    }
    let mut working = model.clone();
    let mut records = Vec::with_capacity(plan.stages.len());
    for stage in &plan.stages {
        let sample = dataset.require(&stage.image_id).expect("validated");
        let hash_before = working.parameter_hash();
        let mut record = StageRecord {
            image_id: stage.image_id.clone(),
            spec: stage.spec.clone(),
            changed_pixels: 0,
            model_hash_before: hash_before.clone(),
            model_hash_after: None,
            captured_under: hash_before,
            traces: Vec::new(),
        };
        if let Err(e) = stage.rewrite.validate(&working) {
            records.push(record);
            return Err(fail(e, records));
        }
        match run_stage(&mut working, sample, stage, dataset as &dyn TextureSource, &mut record) {
            Ok(()) => {
                record.model_hash_after = Some(working.parameter_hash());
                records.push(record);
            }
            Err(e) => {
                records.push(record);
                return Err(fail(e, records));
            }
        }
    }
    Ok(EditOutcome {
        model: working,
        stages: records,
    })
}

fn run_stage(
    working: &mut SegModel,
    sample: &ImageSample,
    stage: &EditStage,
    textures: &dyn TextureSource,
    record: &mut StageRecord,
) -> Result<()> {
    let perturbed = apply(sample, &stage.spec, textures)?;
    record.changed_pixels = perturbed.changed_count();
    let layers = stage.rewrite.resolved_layers(working);
    let kv = capture_kv(working, sample, &perturbed)?;
    // edit every layer from the shared capture, then install all at once
    let mut edited = Vec::with_capacity(layers.len());
    for handle in layers {
        let mut scratch = working.clone();
        let trace = rewrite_layer(&mut scratch, handle, &kv, &stage.rewrite)?;
        edited.push((handle, scratch.layer(handle)?.clone()));
        record.traces.push(trace);
    }
    for (handle, params) in edited {
        *working.layer_mut(handle)? = params;
    }
    Ok(())
}

/// Two (or more) mappings on one image, applied as consecutive stages.
pub fn sequential_mappings(
    model: &SegModel,
    image_id: &str,
    specs: &[PerturbationSpec],
    cfg: &RewriteConfig,
    dataset: &Dataset,
) -> std::result::Result<EditOutcome, EditFailure> {
    let plan = EditPlan {
        stages: specs
            .iter()
            .map(|spec| EditStage {
                image_id: image_id.to_string(),
                spec: spec.clone(),
                rewrite: cfg.clone(),
            })
            .collect(),
    };
    edit_model(model, &plan, dataset)
}
