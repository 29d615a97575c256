//! Double-precision verification suites run by `dpn check`.

use std::collections::HashSet;

use dpn_core::dpm::{dpm_decide, DpmConfig, DpmParams, HeadLayers};
use dpn_core::gradcheck::grad_check;
use dpn_core::losses::{self, IndicatorMatrix};
use dpn_core::sampler::plan_super_batch;
use dpn_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracle,
    Sampler,
}

impl std::str::FromStr for Suite {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracle" => Ok(Suite::Oracle),
            "sampler" => Ok(Suite::Sampler),
            other => Err(RunError::Config(format!(
                "unknown suite {other:?}, expected gradcheck, oracle or sampler"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    /// Largest error, or the violation count for invariant scans.
    pub max_error: f64,
    pub tol: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tol
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> usize {
        self.cases.iter().filter(|c| !c.passed()).count()
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

pub fn run(suite: Suite) -> Result<SuiteReport> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(20),
        Suite::Oracle => oracle_suite(200),
        Suite::Sampler => sampler_suite(100),
    }
}

fn simplex_rows(b: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * n);
    for _ in 0..b {
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(&[b, n], data).expect("row count")
}

/// Matrix versus per-class consistent loss on `b = 128`, `N = 100`, `n ∈ {2, 5, 10}`.
pub fn oracle_suite(cases: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for case in 0..cases {
        let n = [2, 5, 10][case % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64);
        let d = simplex_rows(128, n, &mut rng);
        let labels: Vec<usize> = (0..128).map(|_| rng.random_range(0..100)).collect();
        let ind = IndicatorMatrix::new(&labels, 100)?;
        let mut g = Graph::new();
        let dv = g.input(d);
        let naive = losses::loss_consistent_naive(&mut g, dv, &ind, 1e-5)?;
        let matrix = losses::loss_consistent_matrix(&mut g, dv, &ind, 1e-5)?;
        report.cases.push(CaseResult {
            name: format!("consistent b=128 N=100 n={n} seed={case}"),
            max_error: (g.value(naive).item() - g.value(matrix).item()).abs(),
            tol: 1e-9,
        });
    }
    Ok(report)
}

/// Finite-difference checks of the three losses and of the composed DPM forward.
pub fn gradcheck_suite(instances: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let (eps, tol) = (1e-6, 1e-4);
    let mut push = |name: String, r: dpn_core::gradcheck::GradCheckReport| {
        report.cases.push(CaseResult {
            name,
            max_error: r.max_rel_error,
            tol,
        })
    };
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = simplex_rows(4, 2, &mut rng);
        push(format!("explicit 4x2 seed={seed}"), grad_check(|g, v| losses::loss_explicit(g, v[0]), &[d], eps, tol)?);

        let d = simplex_rows(8, 2, &mut rng);
        let labels: Vec<usize> = (0..8).map(|k| k % 3).collect();
        let ind = IndicatorMatrix::new(&labels, 3)?;
        push(
            format!("consistent-matrix 8x2 seed={seed}"),
            grad_check(|g, v| losses::loss_consistent_matrix(g, v[0], &ind, 1e-5), &[d], eps, tol)?,
        );

        let d = simplex_rows(6, 3, &mut rng);
        push(format!("balance 6x3 seed={seed}"), grad_check(|g, v| losses::loss_balance(g, v[0], 1e-5), &[d], eps, tol)?);

        // GAP -> FC -> ReLU -> FC -> softmax, then all three losses
        let cfg = DpmConfig {
            n_aux: 3,
            reduction: 2,
            head_layers: HeadLayers::Two,
            in_channels: 6,
        };
        let p = DpmParams::<f64>::init(&cfg, &mut rng);
        let u = Tensor::from_fn(&[5, 6, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut inputs = vec![u];
        for (w, b) in &p.layers {
            inputs.push(w.clone());
            inputs.push(Tensor::from_fn(b.shape(), |_| rng.random_range(-0.3..0.3)));
        }
        let labels = [0, 1, 0, 2, 1];
        let ind = IndicatorMatrix::new(&labels, 3)?;
        push(
            format!("dpm-forward C=6 n=3 seed={seed}"),
            grad_check(
                |g, v| {
                    let head = dpn_core::dpm::DpmVars {
                        layers: vec![(v[1], v[2]), (v[3], v[4])],
                    };
                    let d = dpm_decide(g, v[0], &cfg, &head)?;
                    let parts = losses::dpm_losses(g, d, &ind, 1e-5)?;
                    let a = g.add(parts.explicit, parts.consistent)?;
                    g.add(a, parts.balance)
                },
                &inputs,
                eps,
                tol,
            )?,
        );
    }
    Ok(report)
}

/// Category-restriction, disjoint-partition and coverage invariants of seeded
/// plans over CIFAR-100-shaped labels (`N = 100`, `b = 128`, `c = 25`).
pub fn sampler_suite(plans: u64) -> Result<SuiteReport> {
    let labels: Vec<usize> = (0..50_000).map(|i| i % 100).collect();
    let mut report = SuiteReport::default();
    for seed in 0..plans {
        let plan = plan_super_batch(&labels, 100, 128, 25, seed)?;
        let mut violations = 0usize;
        if plan.n_batches() != 4 {
            violations += 1;
        }
        let mut cats = HashSet::new();
        for list in &plan.category_lists {
            for &c in list {
                violations += usize::from(!cats.insert(c));
            }
        }
        violations += 100 - cats.len().min(100);
        let loaded: HashSet<usize> = plan.loaded_indices.iter().copied().collect();
        violations += plan.loaded_indices.len() - loaded.len();
        let mut routed = HashSet::new();
        for (list, batch) in plan.category_lists.iter().zip(&plan.batches) {
            for &s in batch {
                violations += usize::from(!list.contains(&labels[s]));
                violations += usize::from(!routed.insert(s));
            }
        }
        violations += usize::from(routed != loaded);
        report.cases.push(CaseResult {
            name: format!("plan seed={seed} batches={}", plan.n_batches()),
            max_error: violations as f64,
            tol: 0.5,
        });
    }
    Ok(report)
}
