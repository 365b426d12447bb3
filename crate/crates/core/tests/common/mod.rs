#![allow(dead_code)]

pub mod oracles;

use mriseq::model::layers::Mode;
use mriseq::model::{build_model, Model, ModelConfig};
use mriseq::rng::SeededRng;
use mriseq::tensor::Tensor;

pub fn random_input(shape: [usize; 3], batch: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let n = batch * shape.iter().product::<usize>();
    Tensor::new(vec![batch, 1, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.uniform()).collect())
}

/// Scalar cross-entropy oracle: mean of `logsumexp(row) - row[label]`.
pub fn cross_entropy_oracle(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

pub struct GradCheck {
    pub checked: usize,
    /// Samples whose ±eps evaluations fell in different linear regions.
    pub skipped_kinks: usize,
    pub worst: f64,
    pub lines: Vec<String>,
}

/// Analytic cross-entropy gradients of the micro DenseNet on a 6x8x8 input
/// versus central differences, with norm layers on frozen running
/// statistics. Samples straddling a relu/max-pool kink are redrawn, since a
/// finite difference across a kink does not estimate the derivative.
pub fn gradient_check(wanted: usize, eps: f64, seed: u64) -> GradCheck {
    let cfg = ModelConfig::micro_densenet(5).with_input_shape([6, 8, 8]).with_seed(seed);
    let mut model = build_model(&cfg).unwrap();
    for s in 0..3 {
        model.forward(&random_input([6, 8, 8], 2, 100 + s), Mode::Train).unwrap();
    }
    let x = random_input([6, 8, 8], 2, 9 + seed);
    let labels = [1usize, 3];
    let loss = |m: &mut Model| -> (f64, u64) {
        let y = m.forward(&x, Mode::Eval).unwrap();
        (cross_entropy_oracle(y.data(), 5, &labels), m.activation_signature())
    };
    model.zero_grad();
    let y = model.forward(&x, Mode::Eval).unwrap();
    let base_sig = model.activation_signature();
    // d(mean CE)/d logits = (softmax - onehot) / B, computed independently.
    let mut g = Vec::new();
    for (row, &l) in y.data().chunks(5).zip(&labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            let p = (v - m).exp() / z;
            g.push((p - if c == l { 1.0 } else { 0.0 }) / labels.len() as f64);
        }
    }
    model.backward(Tensor::new(vec![2, 5], g));

    let mut params = Vec::new();
    let mut analytic = Vec::new();
    model.clone().for_each_param(|name, p| {
        params.push(name.to_string());
        analytic.push(p.grad.clone());
    });

    let mut rng = SeededRng::derived(seed, &[0x6763]);
    let mut out = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        worst: 0.0,
        lines: Vec::new(),
    };
    let mut attempts = 0;
    while out.checked < wanted && attempts < 50 * wanted {
        attempts += 1;
        let pi = rng.below(params.len());
        let ei = rng.below(analytic[pi].len());
        let name = params[pi].clone();
        let bump = |m: &mut Model, delta: f64| {
            m.for_each_param(|n, p| {
                if n == name {
                    p.value[ei] += delta;
                }
            })
        };
        bump(&mut model, eps);
        let (up, sig_up) = loss(&mut model);
        bump(&mut model, -2.0 * eps);
        let (down, sig_down) = loss(&mut model);
        bump(&mut model, eps);
        if sig_up != base_sig || sig_down != base_sig {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        out.worst = out.worst.max(rel);
        out.checked += 1;
        out.lines.push(format!("{name}[{ei}] analytic {a:.6e} numeric {numeric:.6e} rel {rel:.2e}"));
    }
    out
}
