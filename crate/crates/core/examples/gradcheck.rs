//! Compares the analytic parameter gradients of a tiny segmenter against
//! central finite differences. Points where the left and right one-sided
//! slopes disagree sit on a ReLU kink and are skipped.
//!
//!     cargo run --release --example gradcheck

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segedit::numerics::softmax_cross_entropy;
use segedit::segnet::{ModelConfig, SegModel};
use segedit::synthgen::{generate_sample, GeneratorConfig};

fn main() -> segedit::Result<()> {
    let gen = GeneratorConfig {
        height: 64,
        width: 64,
        min_instances: 2,
        max_instances: 3,
        min_confusers: 1,
        max_confusers: 1,
        ..GeneratorConfig::default()
    };
    let sample = generate_sample("A", 3, &gen)?;
    let config = ModelConfig {
        encoder_widths: vec![4, 4, 4],
        feature_width: 4,
        zero_head: false,
        ..ModelConfig::default()
    };
    let mut model = SegModel::new(config)?;
    // zero biases put whole maps exactly on the ReLU kink
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        for v in model.parameter_mut(name)?.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let loss_of = |m: &SegModel| -> f64 {
        let logits = m.forward(&sample.image).expect("forward");
        softmax_cross_entropy(&logits, &sample.class_map).expect("loss").0
    };
    let (f0, grads) = model.loss_gradients(&sample.image, &sample.class_map)?;
    let eps = 1e-3f32;
    let (mut worst, mut skipped) = (0.0f64, 0);
    for (name, grad) in &grads {
        let n = grad.len();
        for idx in [0, n / 2, n - 1] {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.parameter_mut(name)?.data_mut()[idx] += eps;
            minus.parameter_mut(name)?.data_mut()[idx] -= eps;
            let (fp, fm) = (loss_of(&plus), loss_of(&minus));
            let (right, left) = ((fp - f0) / eps as f64, (f0 - fm) / eps as f64);
            let numeric = (fp - fm) / (2.0 * eps as f64);
            let analytic = grad.data()[idx] as f64;
            let scale = numeric.abs().max(analytic.abs()).max(1e-3);
            if (right - left).abs() > 0.05 * scale + 1e-4 {
                skipped += 1;
                println!("{name:<17} [{idx:>4}] kink, skipped");
                continue;
            }
            let rel = (numeric - analytic).abs() / scale;
            worst = worst.max(rel);
            println!("{name:<17} [{idx:>4}] analytic {analytic:+.6e} numeric {numeric:+.6e} rel {rel:.2e}");
        }
    }
    println!("worst relative error {worst:.2e}, {skipped} kink points skipped");
    Ok(())
}
