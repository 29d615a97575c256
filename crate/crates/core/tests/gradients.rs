//! Tape gradients against central finite differences.

mod common;

use common::*;
use dpn_core::gradcheck::grad_check;
use dpn_core::graph::BnMode;
use dpn_core::losses::{self, IndicatorMatrix};
use dpn_core::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Reduces a tensor-valued node to a scalar with fixed random weights so every
/// output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcd);
    let w = uniform(g.shape(y), -1.0, 1.0, &mut r);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<Gen, F>(name: &str, mut gen: Gen, f: F)
where
    Gen: FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..INSTANCES {
        let mut r = rng(seed * 7919 + name.len() as u64);
        let inputs = gen(&mut r);
        let report = grad_check(
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(g, y, seed)
                }
            },
            &inputs,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "{name} instance {seed}: {report:?}");
    }
}

/// Values bounded away from zero, so ReLU and max kinks stay outside the stencil.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random::<bool>() { m } else { -m }
    })
}

/// Distinct values, so the max of every pooling window is unique by a margin.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rand::seq::SliceRandom::shuffle(&mut vals[..], r);
    Tensor::new(shape, vals).unwrap()
}

#[test]
fn elementwise_ops() {
    check("add", |r| vec![uniform(&[3, 4], -1., 1., r), uniform(&[3, 4], -1., 1., r)], |g, v| g.add(v[0], v[1]));
    check("sub", |r| vec![uniform(&[3, 4], -1., 1., r), uniform(&[3, 4], -1., 1., r)], |g, v| g.sub(v[0], v[1]));
    check("mul", |r| vec![uniform(&[5], -2., 2., r), uniform(&[5], -2., 2., r)], |g, v| g.mul(v[0], v[1]));
    check("scale", |r| vec![uniform(&[2, 3], -1., 1., r)], |g, v| Ok(g.scale(v[0], -2.5)));
    check("add_scalar", |r| vec![uniform(&[2, 3], -1., 1., r)], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check(
        "sub_scalar_var",
        |r| vec![uniform(&[4, 1], -1., 1., r), uniform(&[1], -1., 1., r)],
        |g, v| g.sub_scalar_var(v[0], v[1]),
    );
    check("relu", |r| vec![away_from_zero(&[3, 5], r)], |g, v| Ok(g.relu(v[0])));
    check("ln_clamped", |r| vec![uniform(&[6], 0.05, 3., r)], |g, v| Ok(g.ln_clamped(v[0])));
}

#[test]
fn reductions_and_layout() {
    check("sum", |r| vec![uniform(&[3, 4], -1., 1., r)], |g, v| Ok(g.sum(v[0])));
    check("mean", |r| vec![uniform(&[3, 4], -1., 1., r)], |g, v| Ok(g.mean(v[0])));
    check("sum_rows", |r| vec![uniform(&[5, 3], -1., 1., r)], |g, v| g.sum_rows(v[0]));
    check("transpose", |r| vec![uniform(&[2, 5], -1., 1., r)], |g, v| g.transpose(v[0]));
    check("column", |r| vec![uniform(&[4, 3], -1., 1., r)], |g, v| g.column(v[0], 1));
    check("reshape", |r| vec![uniform(&[2, 6], -1., 1., r)], |g, v| g.reshape(v[0], &[3, 4]));
    check("gap", |r| vec![uniform(&[2, 3, 4, 5], -1., 1., r)], |g, v| g.global_avg_pool(v[0]));
    check(
        "concat_channels",
        |r| vec![uniform(&[2, 3, 2, 2], -1., 1., r), uniform(&[2, 2, 2, 2], -1., 1., r)],
        |g, v| g.concat_channels(v[0], v[1]),
    );
    check("expand_planes", |r| vec![uniform(&[3, 2], -1., 1., r)], |g, v| g.expand_planes(v[0], 3, 2));
}

#[test]
fn linear_algebra() {
    check(
        "matmul",
        |r| vec![uniform(&[3, 4], -1., 1., r), uniform(&[4, 2], -1., 1., r)],
        |g, v| g.matmul(v[0], v[1]),
    );
    check(
        "add_row_bias",
        |r| vec![uniform(&[3, 4], -1., 1., r), uniform(&[4], -1., 1., r)],
        |g, v| g.add_row_bias(v[0], v[1]),
    );
    check(
        "linear",
        |r| vec![uniform(&[3, 5], -1., 1., r), uniform(&[5, 2], -1., 1., r), uniform(&[2], -1., 1., r)],
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    check(
        "add_channel_bias",
        |r| vec![uniform(&[2, 3, 2, 2], -1., 1., r), uniform(&[3], -1., 1., r)],
        |g, v| g.add_channel_bias(v[0], v[1]),
    );
}

#[test]
fn softmax_and_cross_entropy() {
    check("softmax", |r| vec![uniform(&[3, 4], -3., 3., r)], |g, v| g.softmax(v[0]));
    check("cross_entropy", |r| vec![uniform(&[4, 5], -3., 3., r)], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));
}

#[test]
fn convolution_and_pooling() {
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0)] {
        check(
            "conv2d",
            |r| vec![uniform(&[2, 2, 5, 5], -1., 1., r), uniform(&[3, 2, k, k], -1., 1., r)],
            move |g, v| g.conv2d(v[0], v[1], stride, pad),
        );
    }
    check("maxpool2d", |r| vec![distinct(&[2, 2, 4, 4], r)], |g, v| g.maxpool2d(v[0], 2, 2));
}

#[test]
fn batchnorm_modes() {
    check(
        "batchnorm_train",
        |r| vec![uniform(&[3, 2, 3, 3], -2., 2., r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -1., 1., r)],
        |g, v| Ok(g.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?.0),
    );
    check(
        "batchnorm_eval",
        |r| vec![uniform(&[3, 2, 3, 3], -2., 2., r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -1., 1., r)],
        |g, v| {
            let mode = BnMode::Eval {
                running_mean: &[0.2, -0.1],
                running_var: &[1.5, 0.7],
            };
            Ok(g.batchnorm2d(v[0], v[1], v[2], mode)?.0)
        },
    );
}

#[test]
fn decision_losses() {
    check("explicit", |r| vec![simplex_rows(4, 2, r)], |g, v| losses::loss_explicit(g, v[0]));
    check("balance", |r| vec![simplex_rows(6, 3, r)], |g, v| losses::loss_balance(g, v[0], 1e-5));
    let labels = [0, 1, 2, 0, 1, 2, 0, 1];
    check(
        "consistent_naive",
        |r| vec![simplex_rows(8, 2, r)],
        move |g, v| losses::loss_consistent_naive(g, v[0], &IndicatorMatrix::new(&labels, 3).unwrap(), 1e-5),
    );
    check(
        "consistent_matrix",
        |r| vec![simplex_rows(8, 2, r)],
        move |g, v| losses::loss_consistent_matrix(g, v[0], &IndicatorMatrix::new(&labels, 3).unwrap(), 1e-5),
    );
}

#[test]
fn losses_through_softmax() {
    let labels = [0, 1, 2, 0, 1, 2, 0, 1, 1, 2];
    check(
        "softmax_losses",
        |r| vec![uniform(&[10, 3], -2., 2., r)],
        move |g, v| {
            let d = g.softmax(v[0])?;
            let ind = IndicatorMatrix::new(&labels, 4).unwrap();
            let parts = losses::dpm_losses(g, d, &ind, 1e-5)?;
            let ce = g.cross_entropy(v[0], &labels)?;
            losses::total_loss(g, ce, &[parts], &losses::LossWeights::default())
        },
    );
}

#[test]
fn reused_node_accumulates() {
    // y = sum(x*x + x): dy/dx = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.add(sq, x).unwrap();
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let unused = g.param(Tensor::ones(&[4]));
    let y = g.sum(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0; 4]);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(dpn_core::Error::Contract(_))));
}
