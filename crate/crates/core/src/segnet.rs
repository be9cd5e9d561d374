//! A small multi-scale convolutional segmenter.
//!
//! The encoder is a stack of stride-2 conv+relu blocks. A feature-pyramid
//! top-down path merges each scale's 1×1 lateral projection with the
//! upsampled merged map from the scale below it. Each merged map, after a
//! relu, feeds a 3×3 same-padding "output conv"; those are the layers the
//! rewriting engine edits. Their outputs are upsampled to full resolution
//! and summed, and a 1×1 head produces per-pixel class logits. The decoder
//! is linear, so each scale's contribution to the logits is additive.
//! Instances are connected components of target-class pixels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, relu, relu_backward,
    softmax_channels, softmax_cross_entropy, softmax_cross_entropy_weighted, upsample_nearest,
    upsample_nearest_backward, Tensor,
};
use crate::synthgen::{
    connected_components, ImageSample, CLASS_BACKGROUND, CLASS_TARGET, NUM_CLASSES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Channel width of each encoder scale; its length is the scale count.
    pub encoder_widths: Vec<usize>,
    /// Channel width of every output conv.
    pub feature_width: usize,
    pub init_seed: u64,
    /// Start the 1×1 head at zero so an untrained model is uniform.
    pub zero_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            classes: NUM_CLASSES,
            encoder_widths: vec![8, 16, 16],
            feature_width: 16,
            init_seed: 0,
            zero_head: true,
        }
    }
}

impl ModelConfig {
    pub fn scales(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config {
                path: "model.encoder_widths".into(),
                reason: "need at least one scale with positive width".into(),
            });
        }
        if self.in_channels == 0 || self.classes < 2 || self.feature_width == 0 {
            return Err(Error::Config {
                path: "model".into(),
                reason: "channel counts must be positive and classes >= 2".into(),
            });
        }
        Ok(())
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn he_init(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> Self {
        let fan_in = (in_c * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..out_c * in_c * k * k).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![out_c, in_c, k, k], data).expect("sized"),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    fn zeros(out_c: usize, in_c: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_c, in_c, k, k]),
            bias: Tensor::zeros(&[out_c]),
        }
    }
}

/// Index of one edit-target output conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerHandle(pub usize);

/// Where a checkpoint came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_seed: Option<u64>,
    pub train: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: Vec<ConvParams>,
    pub lateral: Vec<ConvParams>,
    pub output: Vec<ConvParams>,
    pub head: ConvParams,
    pub provenance: Provenance,
}

/// Inputs (keys) and outputs (values) of every output conv for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

struct ForwardCache {
    input: Tensor,
    enc_pre: Vec<Tensor>,
    enc_out: Vec<Tensor>,
    merged: Vec<Tensor>,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    summed: Tensor,
    logits: Tensor,
}

struct Grads {
    encoder: Vec<ConvParams>,
    lateral: Vec<ConvParams>,
    output: Vec<ConvParams>,
    head: ConvParams,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut encoder = Vec::new();
        let mut prev = config.in_channels;
        for &width in &config.encoder_widths {
            encoder.push(ConvParams::he_init(&mut rng, width, prev, 3));
            prev = width;
        }
        let lateral = config
            .encoder_widths
            .iter()
            .map(|&width| ConvParams::he_init(&mut rng, config.feature_width, width, 1))
            .collect();
        let output = (0..config.scales())
            .map(|_| ConvParams::he_init(&mut rng, config.feature_width, config.feature_width, 3))
            .collect();
        let head = if config.zero_head {
            ConvParams::zeros(config.classes, config.feature_width, 1)
        } else {
            ConvParams::he_init(&mut rng, config.classes, config.feature_width, 1)
        };
        Ok(Self {
            config,
            encoder,
            lateral,
            output,
            head,
            provenance: Provenance::default(),
        })
    }

    pub fn scales(&self) -> usize {
        self.output.len()
    }

    pub fn handles(&self) -> Vec<LayerHandle> {
        (0..self.scales()).map(LayerHandle).collect()
    }

    pub fn layer(&self, handle: LayerHandle) -> Result<&ConvParams> {
        self.output
            .get(handle.0)
            .ok_or_else(|| Error::invalid(format!("layer handle {} out of range", handle.0)))
    }

    pub fn layer_mut(&mut self, handle: LayerHandle) -> Result<&mut ConvParams> {
        let n = self.output.len();
        self.output
            .get_mut(handle.0)
            .ok_or_else(|| Error::invalid(format!("layer handle {} out of {n}", handle.0)))
    }

    /// Every parameter tensor with its layer path, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, p) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{s}.weight"), &p.weight));
            out.push((format!("encoder.{s}.bias"), &p.bias));
        }
        for (s, p) in self.lateral.iter().enumerate() {
            out.push((format!("lateral.{s}.weight"), &p.weight));
            out.push((format!("lateral.{s}.bias"), &p.bias));
        }
        for (s, p) in self.output.iter().enumerate() {
            out.push((format!("output.{s}.weight"), &p.weight));
            out.push((format!("output.{s}.bias"), &p.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (s, p) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{s}.weight"), &mut p.weight));
            out.push((format!("encoder.{s}.bias"), &mut p.bias));
        }
        for (s, p) in self.lateral.iter_mut().enumerate() {
            out.push((format!("lateral.{s}.weight"), &mut p.weight));
            out.push((format!("lateral.{s}.bias"), &mut p.bias));
        }
        for (s, p) in self.output.iter_mut().enumerate() {
            out.push((format!("output.{s}.weight"), &mut p.weight));
            out.push((format!("output.{s}.bias"), &mut p.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn parameter_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.named_parameters_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    /// Parameter gradients for an arbitrary upstream gradient on the logits,
    /// in `named_parameters` order.
    pub fn parameter_gradients(&self, image: &Tensor, grad_logits: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let cache = self.forward_cached(image)?;
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter_gradients",
                left: grad_logits.shape().to_vec(),
                right: cache.logits.shape().to_vec(),
            });
        }
        let grads = self.backward(&cache, grad_logits)?;
        let names = self.named_parameters().into_iter().map(|(n, _)| n);
        let tensors = grads
            .encoder
            .into_iter()
            .chain(grads.lateral)
            .chain(grads.output)
            .chain([grads.head])
            .flat_map(|p| [p.weight, p.bias]);
        Ok(names.zip(tensors).collect())
    }

    /// Unweighted cross-entropy loss and its parameter gradients.
    pub fn loss_gradients(&self, image: &Tensor, labels: &[u8]) -> Result<(f64, Vec<(String, Tensor)>)> {
        let logits = self.forward(image)?;
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.parameter_gradients(image, &grad)?))
    }

    /// SHA-256 over parameter names, shapes and little-endian bytes.
    pub fn parameter_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_parameters() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (h, w) = match image.shape() {
            &[c, h, w] if c == self.config.in_channels => (h, w),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "segmodel input",
                    left: other.to_vec(),
                    right: vec![self.config.in_channels, 0, 0],
                })
            }
        };
        let factor = 1usize << self.scales();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} must be divisible by {factor}"
            )));
        }
        Ok((h, w))
    }

    fn forward_cached(&self, image: &Tensor) -> Result<ForwardCache> {
        let (h, w) = self.check_image(image)?;
        let input = image.clone().reshape(vec![1, self.config.in_channels, h, w])?;
        let s_count = self.scales();
        let mut enc_pre = Vec::with_capacity(s_count);
        let mut enc_out = Vec::with_capacity(s_count);
        let mut current = input.clone();
        for p in &self.encoder {
            let pre = conv2d_forward(&current, &p.weight, &p.bias, 2, 1)?;
            current = relu(&pre);
            enc_pre.push(pre);
            enc_out.push(current.clone());
        }
        // top-down: merged_s = lateral_s(enc_s) + up2(merged_{s+1})
        let mut merged: Vec<Option<Tensor>> = vec![None; s_count];
        for s in (0..s_count).rev() {
            let p = &self.lateral[s];
            let mut m = conv2d_forward(&enc_out[s], &p.weight, &p.bias, 1, 0)?;
            if let Some(coarser) = merged.get(s + 1).and_then(|k| k.as_ref()) {
                m.add_assign(&upsample_nearest(coarser, 2)?)?;
            }
            merged[s] = Some(m);
        }
        let merged: Vec<Tensor> = merged.into_iter().map(|k| k.expect("filled")).collect();
        let keys: Vec<Tensor> = merged.iter().map(relu).collect();
        let mut values = Vec::with_capacity(s_count);
        let mut summed = Tensor::zeros(&[1, self.config.feature_width, h, w]);
        for (s, (key, p)) in keys.iter().zip(&self.output).enumerate() {
            let value = conv2d_forward(key, &p.weight, &p.bias, 1, 1)?;
            summed.add_assign(&upsample_nearest(&value, 1 << (s + 1))?)?;
            values.push(value);
        }
        let logits = conv2d_forward(&summed, &self.head.weight, &self.head.bias, 1, 0)?;
        Ok(ForwardCache {
            input,
            enc_pre,
            enc_out,
            merged,
            keys,
            values,
            summed,
            logits,
        })
    }

    /// Logits from externally supplied output-conv values, one per scale.
    pub fn decode(&self, values: &[Tensor]) -> Result<Tensor> {
        if values.len() != self.scales() {
            return Err(Error::invalid(format!(
                "expected {} value maps, got {}",
                self.scales(),
                values.len()
            )));
        }
        let shape = values[0].shape();
        let (h, w) = (shape[2] * 2, shape[3] * 2);
        let mut summed = Tensor::zeros(&[1, self.config.feature_width, h, w]);
        for (s, value) in values.iter().enumerate() {
            summed.add_assign(&upsample_nearest(value, 1 << (s + 1))?)?;
        }
        conv2d_forward(&summed, &self.head.weight, &self.head.bias, 1, 0)
    }

    /// Logits (1×C×H×W) for a 3×H×W image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(image)?.logits)
    }

    /// Logits plus the keys and values flowing through every output conv.
    pub fn forward_with_capture(&self, image: &Tensor) -> Result<(Tensor, Capture)> {
        let cache = self.forward_cached(image)?;
        Ok((
            cache.logits,
            Capture {
                keys: cache.keys,
                values: cache.values,
            },
        ))
    }

    /// Per-pixel class probabilities, C×H×W.
    pub fn predict_pixels(&self, image: &Tensor) -> Result<Tensor> {
        let logits = self.forward(image)?;
        let shape = logits.shape()[1..].to_vec();
        softmax_channels(&logits)?.reshape(shape)
    }

    fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Grads> {
        let head = conv2d_backward(&cache.summed, &self.head.weight, grad_logits, 1, 0)?;
        let grad_summed = &head.input;
        let s_count = self.scales();
        let mut output = Vec::with_capacity(s_count);
        let mut grad_keys = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let grad_value = upsample_nearest_backward(grad_summed, 1 << (s + 1))?;
            let g = conv2d_backward(&cache.keys[s], &self.output[s].weight, &grad_value, 1, 1)?;
            grad_keys.push(g.input);
            output.push(ConvParams {
                weight: g.weights,
                bias: g.bias,
            });
        }
        // merged_s feeds its own output conv and, upsampled, merged_{s-1}
        let mut grad_merged: Vec<Tensor> = Vec::with_capacity(s_count);
        for (s, gk) in grad_keys.into_iter().enumerate() {
            let mut g = relu_backward(&cache.merged[s], &gk)?;
            if s > 0 {
                g.add_assign(&upsample_nearest_backward(&grad_merged[s - 1], 2)?)?;
            }
            grad_merged.push(g);
        }
        let mut lateral = Vec::with_capacity(s_count);
        let mut grad_enc_out = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let g = conv2d_backward(&cache.enc_out[s], &self.lateral[s].weight, &grad_merged[s], 1, 0)?;
            grad_enc_out.push(g.input);
            lateral.push(ConvParams {
                weight: g.weights,
                bias: g.bias,
            });
        }
        let mut encoder: Vec<Option<ConvParams>> = vec![None; s_count];
        let mut carry: Option<Tensor> = None;
        for s in (0..s_count).rev() {
            let mut grad_out = grad_enc_out[s].clone();
            if let Some(c) = carry.take() {
                grad_out.add_assign(&c)?;
            }
            let grad_pre = relu_backward(&cache.enc_pre[s], &grad_out)?;
            let below = if s == 0 { &cache.input } else { &cache.enc_out[s - 1] };
            if s == 0 {
                let (gw, gb) =
                    conv2d_backward_params(below, &self.encoder[s].weight, &grad_pre, 2, 1)?;
                encoder[s] = Some(ConvParams { weight: gw, bias: gb });
            } else {
                let g = conv2d_backward(below, &self.encoder[s].weight, &grad_pre, 2, 1)?;
                carry = Some(g.input);
                encoder[s] = Some(ConvParams {
                    weight: g.weights,
                    bias: g.bias,
                });
            }
        }
        Ok(Grads {
            encoder: encoder.into_iter().map(|g| g.expect("filled")).collect(),
            lateral,
            output,
            head: ConvParams {
                weight: head.weights,
                bias: head.bias,
            },
        })
    }

    /// Writes `model.json` and one raw little-endian f32 blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.named_parameters() {
            let file = format!("{name}.f32");
            let path = dir.join(&file);
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ParamEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: self.config.clone(),
            scales: self.scales(),
            parameters: entries,
            parameter_hash: self.parameter_hash(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join("model.json");
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "{}: unknown checkpoint format `{}`",
                path.display(),
                meta.format
            )));
        }
        let mut model = SegModel::new(meta.architecture)?;
        model.provenance = meta.provenance;
        for (name, tensor) in model.named_parameters_mut() {
            let entry = meta
                .parameters
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{name}`")))?;
            if entry.shape != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    left: entry.shape.clone(),
                    right: tensor.shape().to_vec(),
                });
            }
            let blob_path = dir.join(&entry.file);
            let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            if bytes.len() != tensor.len() * 4 {
                return Err(Error::invalid(format!(
                    "{}: expected {} bytes, found {}",
                    blob_path.display(),
                    tensor.len() * 4,
                    bytes.len()
                )));
            }
            for (dst, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if model.parameter_hash() != meta.parameter_hash {
            return Err(Error::invalid(format!(
                "{}: parameter hash mismatch",
                path.display()
            )));
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "segedit-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    architecture: ModelConfig,
    scales: usize,
    parameters: Vec<ParamEntry>,
    parameter_hash: String,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    /// Per-class loss weights; uniform when absent.
    pub class_weights: Option<Vec<f32>>,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            seed: 0,
            hflip: true,
            vflip: true,
            class_weights: None,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss of every epoch.
    pub loss_curve: Vec<f64>,
    pub pixel_accuracy: f64,
}

fn flip_image(image: &Tensor, h: usize, w: usize, horizontal: bool, vertical: bool) -> Tensor {
    let c = image.len() / (h * w);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for r in 0..h {
            let sr = if vertical { h - 1 - r } else { r };
            for col in 0..w {
                let sc = if horizontal { w - 1 - col } else { col };
                out[ch * h * w + r * w + col] = src[ch * h * w + sr * w + sc];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same size")
}

fn flip_labels(labels: &[u8], h: usize, w: usize, horizontal: bool, vertical: bool) -> Vec<u8> {
    let mut out = vec![0u8; labels.len()];
    for r in 0..h {
        let sr = if vertical { h - 1 - r } else { r };
        for c in 0..w {
            let sc = if horizontal { w - 1 - c } else { c };
            out[r * w + c] = labels[sr * w + sc];
        }
    }
    out
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &SegModel) -> Self {
        let sizes: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut SegModel, grads: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let grad_list: Vec<&Tensor> = grads
            .encoder
            .iter()
            .flat_map(|p| [&p.weight, &p.bias])
            .chain(grads.lateral.iter().flat_map(|p| [&p.weight, &p.bias]))
            .chain(grads.output.iter().flat_map(|p| [&p.weight, &p.bias]))
            .chain([&grads.head.weight, &grads.head.bias])
            .collect();
        for (k, ((_, param), grad)) in model
            .named_parameters_mut()
            .into_iter()
            .zip(grad_list)
            .enumerate()
        {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + 1e-8);
            }
        }
    }
}

/// Trains with pixelwise cross-entropy, one image per step, using Adam.
///
/// Deterministic given `cfg.seed`; `epochs == 0` leaves the model untouched.
pub fn train(model: &mut SegModel, samples: &[&ImageSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config {
            path: "train.lr".into(),
            reason: "must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let s = samples[idx];
            let hf = cfg.hflip && rand::Rng::random_bool(&mut rng, 0.5);
            let vf = cfg.vflip && rand::Rng::random_bool(&mut rng, 0.5);
            let image = flip_image(&s.image, s.height, s.width, hf, vf);
            let labels = model_labels(
                &flip_labels(&s.class_map, s.height, s.width, hf, vf),
                model.config.classes,
            );
            let cache = model.forward_cached(&image)?;
            let (loss, grad) =
                softmax_cross_entropy_weighted(&cache.logits, &labels, cfg.class_weights.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            let grads = model.backward(&cache, &grad)?;
            adam.step(model, &grads, cfg);
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        loss_curve.push(mean);
    }
    let pixel_accuracy = mean_pixel_accuracy(model, samples)?;
    model.provenance.train = Some(cfg.clone());
    model.provenance.final_loss = loss_curve.last().copied();
    Ok(TrainReport {
        loss_curve,
        pixel_accuracy,
    })
}

/// Dataset class ids as seen by a model with `classes` outputs. A
/// two-class model learns target vs everything else, so confusers count as
/// background.
pub fn model_labels(class_map: &[u8], classes: usize) -> Vec<u8> {
    if classes >= NUM_CLASSES {
        return class_map.to_vec();
    }
    class_map
        .iter()
        .map(|&c| if c == CLASS_TARGET { CLASS_TARGET } else { CLASS_BACKGROUND })
        .collect()
}

/// Per-pixel argmax class of a C×H×W probability tensor.
pub fn argmax_classes(probs: &Tensor) -> Vec<u8> {
    let c = probs.shape()[0];
    let plane = probs.len() / c;
    let d = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Fraction of pixels whose argmax class matches the label, pooled.
pub fn mean_pixel_accuracy(model: &SegModel, samples: &[&ImageSample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let pred = argmax_classes(&model.predict_pixels(&s.image)?);
        let labels = model_labels(&s.class_map, model.config.classes);
        correct += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    Ok(correct as f64 / total as f64)
}

/// A predicted or ground-truth instance over an H×W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    pub score: f64,
}

impl InstanceMask {
    pub fn from_indices(height: usize, width: usize, indices: &[usize], score: f64) -> Self {
        let mut pixels = vec![false; height * width];
        for &i in indices {
            pixels[i] = true;
        }
        Self {
            height,
            width,
            pixels,
            score,
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&b| b).count()
    }

    /// Ground-truth masks of every instance in a sample, ids ascending.
    pub fn ground_truth(sample: &ImageSample) -> Vec<InstanceMask> {
        (1..=sample.num_instances() as u16)
            .map(|id| InstanceMask {
                height: sample.height,
                width: sample.width,
                pixels: sample.instance_mask(id),
                score: 1.0,
            })
            .collect()
    }
}

pub const DEFAULT_MIN_AREA: usize = 5;

/// Connected components of pixels whose argmax is the target class and
/// whose target probability exceeds `threshold`.
pub fn extract_instances(probs: &Tensor, threshold: f32, min_area: usize) -> Result<Vec<InstanceMask>> {
    let (c, h, w) = match probs.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::invalid(format!("expected CxHxW probabilities, got {other:?}"))),
    };
    let target = CLASS_TARGET as usize;
    if target >= c {
        return Err(Error::invalid("probabilities lack the target class"));
    }
    let plane = h * w;
    let d = probs.data();
    let classes = argmax_classes(probs);
    let detections: Vec<bool> = (0..plane)
        .map(|p| classes[p] as usize == target && d[target * plane + p] > threshold)
        .collect();
    Ok(connected_components(&detections, h, w)
        .into_iter()
        .filter(|comp| comp.len() >= min_area)
        .map(|comp| {
            let score = comp.iter().map(|&p| d[target * plane + p] as f64).sum::<f64>()
                / comp.len() as f64;
            InstanceMask::from_indices(h, w, &comp, score)
        })
        .collect())
}
