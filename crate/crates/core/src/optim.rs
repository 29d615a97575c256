//! SGD with momentum and the step learning-rate schedule.

use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::losses::LossWeights;
use crate::sampler::SamplerKind;
use crate::{Error, Real, Result, Tensor};

/// Optimizer, schedule and sampling settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Global gradient-norm limit; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    /// 200 epochs of batch 128 at lr 0.1, ×0.2 at epochs 60/120/160,
    /// momentum 0.9, weight decay 5e-4.
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr0: 0.1,
            lr_milestones: alloc::vec![60, 120, 160],
            lr_gamma: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_weights: LossWeights::default(),
            sampler: SamplerKind::Plain,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_milestones must be strictly increasing, got {:?}",
                self.lr_milestones
            )));
        }
        if let Some(&last) = self.lr_milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight_decay >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.loss_weights.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, &self.lr_milestones, self.lr_gamma)
    }
}

/// `lr0 · gamma^(number of milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, lr0: f64, milestones: &[usize], gamma: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * Float::powi(gamma, passed as i32)
}

/// One momentum-SGD update over parallel slices:
/// `v ← momentum·v + (g + wd·p)`, `p ← p − lr·v`.
///
/// Nothing is modified when any gradient is non-finite; the error names the
/// first offending parameter.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    names: &[String],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != velocity[i].shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::NonFinite(format!("gradient of parameter {i} ({name})")));
        }
    }
    let (lr, mom, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mom * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum();
    let norm = Float::sqrt(sq);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
