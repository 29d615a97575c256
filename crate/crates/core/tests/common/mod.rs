#![allow(dead_code)]

use dpn_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Rows drawn from a softmax of uniform logits, strictly inside the simplex.
pub fn simplex_rows(b: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * n);
    for _ in 0..b {
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(&[b, n], data).unwrap()
}

pub fn labels(b: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n_classes)).collect()
}

/// Consistent loss straight from its definition, in plain loops.
pub fn consistent_oracle(d: &[f64], b: usize, n: usize, labels: &[usize], n_classes: usize, delta: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n_classes {
        let members: Vec<usize> = (0..b).filter(|&k| labels[k] == i).collect();
        let c = members.len() as f64;
        if members.is_empty() {
            continue;
        }
        for j in 0..n {
            let m = members.iter().map(|&k| d[k * n + j]).sum::<f64>() / (c + delta);
            let v = members.iter().map(|&k| (d[k * n + j] - m).powi(2)).sum::<f64>() / (c - 1.0 + delta);
            total += v;
        }
    }
    total / (n_classes * n) as f64
}

pub fn explicit_oracle(d: &[f64], b: usize) -> f64 {
    -d.iter().map(|&p| p * p.max(1e-12).ln()).sum::<f64>() / b as f64
}

pub fn balance_oracle(d: &[f64], b: usize, n: usize, delta: f64) -> f64 {
    (0..n)
        .map(|j| {
            let m = (0..b).map(|k| d[k * n + j]).sum::<f64>() + delta;
            m * m.ln()
        })
        .sum()
}
