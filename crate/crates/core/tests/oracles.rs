//! Kernels and losses against direct loop implementations.

mod common;

use approx::assert_abs_diff_eq;
use common::*;
use dpn_core::graph::BnMode;
use dpn_core::losses::{self, IndicatorMatrix};
use dpn_core::{Graph, Tensor};
use rand::Rng;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..30 {
        let (m, k, n) = (r.random_range(1..12), r.random_range(1..12), r.random_range(1..12));
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k, n], -1.0, 1.0, &mut r);
        let got = a.matmul(&b).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let vc = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.at(&[i, t]) * b.at(&[t, j])).sum();
                assert_abs_diff_eq!(got.at(&[i, j]), want, epsilon = 1e-12);
                assert_abs_diff_eq!(g.value(vc).at(&[i, j]), want, epsilon = 1e-12);
            }
        }
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ko, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, ko, oh, ow]);
    for n in 0..b {
        for o in 0..ko {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[n, ci, iy as usize, ix as usize]) * w.at(&[o, ci, dy, dx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * ko + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_sums() {
    let mut r = rng(2);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (3, 1, 0), (2, 2, 0)] {
        let x = uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut r);
        let w = uniform(&[4, 3, k, k], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (vx, vw) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(vx, vw, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-10, "k={k} stride={stride} pad={pad}");
    }
}

#[test]
fn global_avg_pool_is_plane_mean() {
    let mut r = rng(3);
    let x = uniform(&[3, 5, 4, 6], -3.0, 3.0, &mut r);
    let mut g = Graph::new();
    let vx = g.input(x.clone());
    let p = g.global_avg_pool(vx).unwrap();
    assert_eq!(g.shape(p), &[3, 5]);
    for n in 0..3 {
        for c in 0..5 {
            let plane = &x.data()[(n * 5 + c) * 24..(n * 5 + c + 1) * 24];
            let want = plane.iter().sum::<f64>() / 24.0;
            assert_abs_diff_eq!(g.value(p).at(&[n, c]), want, epsilon = 1e-12);
        }
    }
}

#[test]
fn maxpool_matches_window_max() {
    let mut r = rng(4);
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let vx = g.input(x.clone());
    let y = g.maxpool2d(vx, 2, 2).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(&[n, c, 2 * oy + dy, 2 * ox + dx]));
                        }
                    }
                    assert_eq!(g.value(y).at(&[n, c, oy, ox]), m);
                }
            }
        }
    }
}

#[test]
fn batchnorm_train_and_eval() {
    let mut r = rng(5);
    let x = uniform(&[4, 2, 3, 3], -2.0, 2.0, &mut r);
    let gamma = Tensor::from_f64(&[2], &[1.5, 0.5]).unwrap();
    let beta = Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap();
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
    let (y, stats) = g.batchnorm2d(vx, vg, vb, BnMode::Train).unwrap();
    let stats = stats.unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..9).map(move |i| (n, i)))
            .map(|(n, i)| x.data()[(n * 2 + c) * 9 + i])
            .collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 36.0;
        assert_abs_diff_eq!(stats.mean[c], m, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.var_unbiased[c], var * 36.0 / 35.0, epsilon = 1e-12);
        for n in 0..4 {
            for i in 0..9 {
                let idx = (n * 2 + c) * 9 + i;
                let want = gamma.data()[c] * (x.data()[idx] - m) / (var + 1e-5).sqrt() + beta.data()[c];
                assert_abs_diff_eq!(g.value(y).data()[idx], want, epsilon = 1e-12);
            }
        }
    }

    let (rm, rv) = ([0.5, -0.5], [2.0, 0.25]);
    let (y, none) = g
        .batchnorm2d(vx, vg, vb, BnMode::Eval { running_mean: &rm, running_var: &rv })
        .unwrap();
    assert!(none.is_none());
    let idx = 9 + 4;
    let want = 0.5 * (x.data()[idx] + 0.5) / (0.25f64 + 1e-5).sqrt() - 0.2;
    assert_abs_diff_eq!(g.value(y).data()[idx], want, epsilon = 1e-12);
}

#[test]
fn softmax_and_cross_entropy() {
    let mut r = rng(6);
    let z = uniform(&[5, 7], -30.0, 30.0, &mut r);
    let labels = labels(5, 7, &mut r);
    let mut g = Graph::new();
    let vz = g.input(z.clone());
    let p = g.softmax(vz).unwrap();
    let ce = g.cross_entropy(vz, &labels).unwrap();
    let mut want_ce = 0.0;
    for k in 0..5 {
        let row = z.row(k);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for j in 0..7 {
            assert_abs_diff_eq!(g.value(p).at(&[k, j]), (row[j] - lse).exp(), epsilon = 1e-12);
        }
        want_ce += lse - row[labels[k]];
    }
    assert_abs_diff_eq!(g.value(ce).item(), want_ce / 5.0, epsilon = 1e-10);
}

#[test]
fn losses_match_loop_definitions() {
    let mut r = rng(7);
    for case in 0..50 {
        let b = r.random_range(2..40);
        let n = r.random_range(2..6);
        let nc = r.random_range(1..8);
        let d = simplex_rows(b, n, &mut r);
        let lab = labels(b, nc, &mut r);
        let ind = IndicatorMatrix::new(&lab, nc).unwrap();
        let mut g = Graph::new();
        let vd = g.input(d.clone());
        let naive = losses::loss_consistent_naive(&mut g, vd, &ind, 1e-5).unwrap();
        let matrix = losses::loss_consistent_matrix(&mut g, vd, &ind, 1e-5).unwrap();
        let explicit = losses::loss_explicit(&mut g, vd).unwrap();
        let balance = losses::loss_balance(&mut g, vd, 1e-5).unwrap();
        let want = consistent_oracle(d.data(), b, n, &lab, nc, 1e-5);
        assert_abs_diff_eq!(g.value(naive).item(), want, epsilon = 1e-12);
        assert!((g.value(matrix).item() - want).abs() < 1e-9, "case {case}");
        assert_abs_diff_eq!(g.value(explicit).item(), explicit_oracle(d.data(), b), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(balance).item(), balance_oracle(d.data(), b, n, 1e-5), epsilon = 1e-10);
    }
}

#[test]
fn explicit_extremes() {
    let mut g = Graph::new();
    let one_hot = g.input(Tensor::from_f64(&[2, 3], &[1., 0., 0., 0., 0., 1.]).unwrap());
    let l = losses::loss_explicit(&mut g, one_hot).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 0.0, epsilon = 1e-12);
    let uniform = g.input(Tensor::full(&[4, 4], 0.25));
    let l = losses::loss_explicit(&mut g, uniform).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 4f64.ln(), epsilon = 1e-12);
}
