//! Accuracy and decision-coherence statistics.

use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Real, Tensor};

/// Whether `label` is among the `k` largest entries of `row`.
/// Ties rank the lower class index first.
pub fn in_top_k<T: Real>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    rank < k
}

/// Running top-1 / top-5 counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TopK {
    pub top1: usize,
    pub top5: usize,
    pub total: usize,
}

impl TopK {
    /// Adds a `[B,N]` logits batch.
    pub fn update<T: Real>(&mut self, logits: &Tensor<T>, labels: &[usize]) {
        let n = logits.shape()[1];
        for (k, &l) in labels.iter().enumerate() {
            let row = &logits.data()[k * n..(k + 1) * n];
            self.top1 += in_top_k(row, l, 1) as usize;
            self.top5 += in_top_k(row, l, 5) as usize;
            self.total += 1;
        }
    }

    pub fn top1_rate(&self) -> f64 {
        self.top1 as f64 / self.total.max(1) as f64
    }

    pub fn top5_rate(&self) -> f64 {
        self.top5 as f64 / self.total.max(1) as f64
    }
}

/// Spread of one decision score within and across fine classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    /// Mean over present classes of the within-class (population) std.
    pub within_class_std: f64,
    /// Population std over all samples.
    pub overall_std: f64,
}

impl Coherence {
    pub fn ratio(&self) -> f64 {
        self.within_class_std / self.overall_std
    }

    /// Within-class spread below `factor` times the overall spread.
    pub fn holds(&self, factor: f64) -> bool {
        self.overall_std > 0.0 && self.within_class_std < factor * self.overall_std
    }
}

fn pop_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Float::sqrt(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

pub fn coherence(scores: &[f64], labels: &[usize]) -> Coherence {
    assert_eq!(scores.len(), labels.len(), "coherence: one label per score");
    assert!(!scores.is_empty(), "coherence of an empty set");
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    for (&s, &l) in scores.iter().zip(labels) {
        per[l].push(s);
    }
    let stds: Vec<f64> = per.iter().filter(|v| !v.is_empty()).map(|v| pop_std(v)).collect();
    Coherence {
        within_class_std: stds.iter().sum::<f64>() / stds.len() as f64,
        overall_std: pop_std(scores),
    }
}
