// Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod checks;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segedit::numerics::Tensor;
use segedit::segnet::InstanceMask;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Direct sliding-window cross-correlation: bias first, then taps in
/// (input channel, kernel row, kernel column) order, padding taps skipped.
pub fn naive_conv(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    let [n, ci, h, w] = input.shape().try_into().unwrap();
    let [co, _, kh, kw] = weights.shape().try_into().unwrap();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let (x, wt, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0f32; n * co * oh * ow];
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bn * ci + i) * h + iy as usize) * w + ix as usize];
                                acc += wt[((o * ci + i) * kh + ky) * kw + kx] * xv;
                            }
                        }
                    }
                    out[((bn * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

pub const FD_STEP: f32 = 1e-2;
pub const FD_TOL: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn dot(a: &Tensor, r: &[f64]) -> f64 {
    a.data().iter().zip(r).map(|(&x, &y)| x as f64 * y).sum()
}

#[derive(Debug, Default, Clone)]
pub struct FdStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
    pub cases: usize,
    /// Entries within `FD_TOL`.
    pub within: usize,
}

impl FdStats {
    pub fn record(&mut self, what: &str, analytic: f64, numeric: f64, floor: f64) {
        let e = rel_err(analytic, numeric, floor);
        self.checked += 1;
        if e <= FD_TOL {
            self.within += 1;
        }
        if e > self.worst {
            self.worst = e;
            self.worst_at = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: FdStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.cases += other.cases;
        self.within += other.within;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }
}

/// Central difference of `f` along entry `idx` of `x`.
pub fn central(x: &Tensor, idx: usize, h: f32, f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let mut p = x.clone();
    let mut m = x.clone();
    p.data_mut()[idx] += h;
    m.data_mut()[idx] -= h;
    (f(&p) - f(&m)) / (2.0 * h as f64)
}

fn check_all(stats: &mut FdStats, what: &str, x: &Tensor, grad: &Tensor, f: &dyn Fn(&Tensor) -> f64) {
    for idx in 0..x.len() {
        let n = central(x, idx, FD_STEP, f);
        stats.record(&format!("{what}[{idx}]"), grad.data()[idx] as f64, n, GRAD_FLOOR);
    }
}

/// Denominator floor of the relative error: entries smaller than this are
/// held to an absolute error of `FD_TOL * GRAD_FLOOR`, which is where f32
/// rounding inside a 1e-2 stencil lives.
pub const GRAD_FLOOR: f64 = 1e-2;

pub fn gradcheck_conv(seed: u64) -> FdStats {
    use segedit::numerics::{conv2d_backward, conv2d_forward};
    let mut g = rng(seed);
    let n = g.random_range(1..=2);
    let ci = g.random_range(1..=3);
    let co = g.random_range(1..=3);
    let k = g.random_range(1..=3);
    let stride = g.random_range(1..=2);
    let pad = g.random_range(0..k);
    let h = g.random_range(k..=7);
    let w = g.random_range(k..=7);
    let x = random_tensor(&mut g, &[n, ci, h, w], -1.0, 1.0);
    let wt = random_tensor(&mut g, &[co, ci, k, k], -1.0, 1.0);
    let b = random_tensor(&mut g, &[co], -1.0, 1.0);
    let y = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
    let r: Vec<f64> = (0..y.len()).map(|_| g.random_range(-1.0..1.0)).collect();
    let up = Tensor::new(y.shape().to_vec(), r.iter().map(|&v| v as f32).collect()).unwrap();
    let grads = conv2d_backward(&x, &wt, &up, stride, pad).unwrap();
    let mut s = FdStats { cases: 1, ..Default::default() };
    check_all(&mut s, "conv input", &x, &grads.input, &|xx| dot(&conv2d_forward(xx, &wt, &b, stride, pad).unwrap(), &r));
    check_all(&mut s, "conv weight", &wt, &grads.weights, &|ww| dot(&conv2d_forward(&x, ww, &b, stride, pad).unwrap(), &r));
    check_all(&mut s, "conv bias", &b, &grads.bias, &|bb| dot(&conv2d_forward(&x, &wt, bb, stride, pad).unwrap(), &r));
    s
}

/// Points whose central-difference stencil straddles a kink are skipped.
pub fn gradcheck_relu(seed: u64) -> FdStats {
    use segedit::numerics::{relu, relu_backward};
    let mut g = rng(seed);
    let len = g.random_range(4..=40);
    let x = random_tensor(&mut g, &[len], -1.0, 1.0);
    let r: Vec<f64> = (0..len).map(|_| g.random_range(-1.0..1.0)).collect();
    let up = Tensor::new(vec![len], r.iter().map(|&v| v as f32).collect()).unwrap();
    let grad = relu_backward(&x, &up).unwrap();
    let mut s = FdStats { cases: 1, ..Default::default() };
    for idx in 0..len {
        if x.data()[idx].abs() <= FD_STEP {
            s.skipped += 1;
            continue;
        }
        let n = central(&x, idx, FD_STEP, &|xx| dot(&relu(xx), &r));
        s.record(&format!("relu[{idx}]"), grad.data()[idx] as f64, n, GRAD_FLOOR);
    }
    s
}

pub fn gradcheck_upsample(seed: u64) -> FdStats {
    use segedit::numerics::{upsample_nearest, upsample_nearest_backward};
    let mut g = rng(seed);
    let factor = g.random_range(1..=3);
    let shape = [g.random_range(1..=2), g.random_range(1..=3), g.random_range(1..=4), g.random_range(1..=4)];
    let x = random_tensor(&mut g, &shape, -1.0, 1.0);
    let y = upsample_nearest(&x, factor).unwrap();
    let r: Vec<f64> = (0..y.len()).map(|_| g.random_range(-1.0..1.0)).collect();
    let up = Tensor::new(y.shape().to_vec(), r.iter().map(|&v| v as f32).collect()).unwrap();
    let grad = upsample_nearest_backward(&up, factor).unwrap();
    let mut s = FdStats { cases: 1, ..Default::default() };
    check_all(&mut s, "upsample", &x, &grad, &|xx| dot(&upsample_nearest(xx, factor).unwrap(), &r));
    s
}

pub fn gradcheck_l1(seed: u64) -> FdStats {
    use segedit::numerics::l1_loss;
    let mut g = rng(seed);
    let shape = [1, g.random_range(1..=3), g.random_range(2..=5), g.random_range(2..=5)];
    let pred = random_tensor(&mut g, &shape, -1.0, 1.0);
    let target = random_tensor(&mut g, &shape, -1.0, 1.0);
    let plane = shape[2] * shape[3];
    let mask = if g.random_bool(0.5) {
        let mut bits: Vec<f32> = (0..plane).map(|_| if g.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        bits[0] = 1.0;
        Some(Tensor::new(vec![shape[2], shape[3]], bits).unwrap())
    } else {
        None
    };
    let (_, grad) = l1_loss(&pred, &target, mask.as_ref()).unwrap();
    let mut s = FdStats { cases: 1, ..Default::default() };
    for idx in 0..pred.len() {
        if (pred.data()[idx] - target.data()[idx]).abs() <= FD_STEP {
            s.skipped += 1;
            continue;
        }
        let n = central(&pred, idx, FD_STEP, &|p| l1_loss(p, &target, mask.as_ref()).unwrap().0);
        let selected = mask.as_ref().is_none_or(|m| m.data()[idx % plane] != 0.0);
        // unselected entries have an exactly zero slope on both sides
        let floor = if selected { GRAD_FLOOR } else { 1.0 };
        s.record(&format!("l1[{idx}]"), grad.data()[idx] as f64, n, floor);
    }
    s
}

pub fn gradcheck_cross_entropy(seed: u64) -> FdStats {
    use segedit::numerics::softmax_cross_entropy_weighted;
    let mut g = rng(seed);
    let shape = [g.random_range(1..=2), g.random_range(2..=4), g.random_range(1..=3), g.random_range(1..=3)];
    let logits = random_tensor(&mut g, &shape, -2.0, 2.0);
    let labels: Vec<u8> = (0..shape[0] * shape[2] * shape[3]).map(|_| g.random_range(0..shape[1]) as u8).collect();
    let weights: Option<Vec<f32>> = g.random_bool(0.5).then(|| (0..shape[1]).map(|_| g.random_range(0.5..2.0)).collect());
    let (_, grad) = softmax_cross_entropy_weighted(&logits, &labels, weights.as_deref()).unwrap();
    let mut s = FdStats { cases: 1, ..Default::default() };
    check_all(&mut s, "cross-entropy", &logits, &grad, &|l| {
        softmax_cross_entropy_weighted(l, &labels, weights.as_deref()).unwrap().0
    });
    s
}

/// Positive weights and biases on a positive image keep every pre-activation
/// far above zero, so the logits are linear in any single parameter and a
/// wide central difference is exact up to rounding.
pub const MODEL_FD_STEP: f32 = 1e-1;
/// f32 rounding of a whole forward pass leaves ~4e-6 in `f`, ~5e-5 in the quotient.
pub const MODEL_GRAD_FLOOR: f64 = 0.1;
/// Mixed-sign models cross ReLU kinks everywhere; a one-sided slope mismatch
/// above this marks a kink inside the stencil.
pub const MIXED_FD_STEP: f32 = 1e-2;
/// Same rounding at the narrower mixed-sign stencil.
pub const MIXED_GRAD_FLOOR: f64 = 0.5;

fn tiny_model(g: &mut ChaCha8Rng, seed: u64, positive: bool) -> segedit::segnet::SegModel {
    use segedit::segnet::{ModelConfig, SegModel};
    let config = ModelConfig {
        encoder_widths: vec![g.random_range(2..=4), g.random_range(2..=4), g.random_range(2..=4)],
        feature_width: g.random_range(2..=4),
        zero_head: false,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let mut model = SegModel::new(config).unwrap();
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let t = model.parameter_mut(name).unwrap();
        let fan_in = (t.len() / t.shape()[0]).max(1) as f32;
        let bias = t.shape().len() == 1;
        for v in t.data_mut() {
            *v = match (positive, bias) {
                (true, true) => g.random_range(0.3..0.6),
                (true, false) => g.random_range(0.2..1.8) / fan_in,
                (false, _) => *v + g.random_range(-0.3..0.3),
            };
        }
    }
    model
}

fn model_case(seed: u64, positive: bool) -> FdStats {
    use segedit::segnet::SegModel;
    let mut g = rng(seed);
    let mut model = tiny_model(&mut g, seed, positive);
    let (lo, step, floor) = if positive { (0.2, MODEL_FD_STEP, MODEL_GRAD_FLOOR) } else { (0.0, MIXED_FD_STEP, MIXED_GRAD_FLOOR) };
    let image = random_tensor(&mut g, &[3, 8, 8], lo, 1.0);
    let logits = model.forward(&image).unwrap();
    let r: Vec<f64> = (0..logits.len()).map(|_| g.random_range(-1.0..1.0)).collect();
    let up = Tensor::new(logits.shape().to_vec(), r.iter().map(|&v| v as f32).collect()).unwrap();
    let grads = model.parameter_gradients(&image, &up).unwrap();
    let f = |m: &SegModel| dot(&m.forward(&image).unwrap(), &r);
    let f0 = f(&model);
    let h = step as f64;
    let mut s = FdStats { cases: 1, ..Default::default() };
    for (name, grad) in &grads {
        for idx in 0..grad.len() {
            let orig = model.parameter_mut(name).unwrap().data()[idx];
            model.parameter_mut(name).unwrap().data_mut()[idx] = orig + step;
            let fp = f(&model);
            model.parameter_mut(name).unwrap().data_mut()[idx] = orig - step;
            let fm = f(&model);
            model.parameter_mut(name).unwrap().data_mut()[idx] = orig;
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            let scale = right.abs().max(left.abs()).max(if positive { floor } else { GRAD_FLOOR });
            if (right - left).abs() > 1e-3 * scale {
                s.skipped += 1;
                continue;
            }
            s.record(&format!("{name}[{idx}]"), grad.data()[idx] as f64, (fp - fm) / (2.0 * h), floor);
        }
    }
    s
}

/// Whole-model parameter gradients of `sum(r * logits)` in the kink-free regime.
pub fn gradcheck_model(seed: u64) -> FdStats {
    model_case(seed, true)
}

/// Mixed-sign whole model; kinks make the worst entry meaningless, so callers
/// look at the fraction within tolerance.
pub fn gradcheck_model_mixed(seed: u64) -> FdStats {
    model_case(seed, false)
}

/// Every op over `seeds` random cases each.
pub fn gradcheck_suite(seeds: u64) -> Vec<(&'static str, FdStats)> {
    type Check = fn(u64) -> FdStats;
    let ops: [(&str, Check); 6] = [
        ("conv2d", gradcheck_conv),
        ("relu", gradcheck_relu),
        ("upsample_nearest", gradcheck_upsample),
        ("l1_loss", gradcheck_l1),
        ("softmax_cross_entropy", gradcheck_cross_entropy),
        ("segmodel", gradcheck_model),
    ];
    ops.iter()
        .map(|(name, check)| {
            let mut total = FdStats::default();
            for seed in 0..seeds {
                total.merge(check(1000 + seed));
            }
            (*name, total)
        })
        .collect()
}

/// Pixel-set view of a mask.
pub fn pixel_set(m: &InstanceMask) -> HashSet<(usize, usize)> {
    (0..m.height * m.width)
        .filter(|&i| m.pixels[i])
        .map(|i| (i / m.width, i % m.width))
        .collect()
}

/// (precision, recall, iou) of `pred` against `gt` by set arithmetic.
pub fn set_metrics(gt: &InstanceMask, pred: &InstanceMask) -> (f64, f64, f64) {
    let (a, b) = (pixel_set(gt), pixel_set(pred));
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    (inter / b.len() as f64, inter / a.len() as f64, inter / union)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> InstanceMask {
    let mut pixels: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    let forced = rng.random_range(0..h * w);
    pixels[forced] = true;
    InstanceMask { height: h, width: w, pixels, score: 1.0 }
}

pub fn mask_from(h: usize, w: usize, cells: &[(usize, usize)]) -> InstanceMask {
    let idx: Vec<usize> = cells.iter().map(|&(r, c)| r * w + c).collect();
    InstanceMask::from_indices(h, w, &idx, 1.0)
}
