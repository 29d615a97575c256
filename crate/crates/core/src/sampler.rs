//! Mini-batch construction.
//!
//! The load-shuffle-split sampler loads `m·b` samples at once, shuffles the
//! list of category ids, splits it into `m = ⌈N/c⌉` chunks of at most `c`
//! categories and routes every loaded sample to the batch owning its category.
//! With many classes this raises the number of same-class samples per batch,
//! which the consistent loss needs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Sampling strategy for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Plain,
    LoadShuffleSplit { categories_per_batch: usize },
}

/// One load-shuffle-split super-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperBatchPlan {
    pub loaded_indices: Vec<usize>,
    /// Disjoint category chunks covering every category id.
    pub category_lists: Vec<Vec<usize>>,
    /// `batches[t]` holds the loaded samples whose category is in `category_lists[t]`.
    pub batches: Vec<Vec<usize>>,
}

impl SuperBatchPlan {
    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }
}

/// Number of batches per super-batch, `⌈N/c⌉`.
pub fn batches_per_plan(n_categories: usize, categories_per_batch: usize) -> Result<usize> {
    if categories_per_batch == 0 || categories_per_batch > n_categories {
        return Err(Error::Config(format!(
            "categories per batch must be in 1..={n_categories}, got {categories_per_batch}"
        )));
    }
    Ok(n_categories.div_ceil(categories_per_batch))
}

/// Shuffles the category ids, splits them into chunks, and routes `loaded` by label.
pub fn split_loaded(
    labels: &[usize],
    loaded: Vec<usize>,
    n_categories: usize,
    categories_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SuperBatchPlan> {
    batches_per_plan(n_categories, categories_per_batch)?;
    let mut ids: Vec<usize> = (0..n_categories).collect();
    ids.shuffle(rng);
    let category_lists: Vec<Vec<usize>> = ids.chunks(categories_per_batch).map(|c| c.to_vec()).collect();
    let mut owner = vec![usize::MAX; n_categories];
    for (t, list) in category_lists.iter().enumerate() {
        for &c in list {
            owner[c] = t;
        }
    }
    let mut batches = vec![Vec::new(); category_lists.len()];
    for &s in &loaded {
        let label = labels[s];
        if label >= n_categories {
            return Err(Error::Dimension(format!(
                "sample {s} has label {label} but there are {n_categories} categories"
            )));
        }
        batches[owner[label]].push(s);
    }
    Ok(SuperBatchPlan {
        loaded_indices: loaded,
        category_lists,
        batches,
    })
}

/// Builds one plan: draws `m·b` distinct samples uniformly (all of them if the
/// dataset is smaller), then shuffles and splits the categories.
pub fn plan_super_batch(
    labels: &[usize],
    n_categories: usize,
    batch_size: usize,
    categories_per_batch: usize,
    rng_seed: u64,
) -> Result<SuperBatchPlan> {
    if labels.is_empty() {
        return Err(Error::Config("cannot plan over an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let m = batches_per_plan(n_categories, categories_per_batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let want = (m * batch_size).min(labels.len());
    let loaded = rand::seq::index::sample(&mut rng, labels.len(), want).into_vec();
    split_loaded(labels, loaded, n_categories, categories_per_batch, &mut rng)
}

/// Index batches for one epoch.
///
/// Both samplers walk one random permutation of the dataset, so every sample
/// is used at most once per epoch. The plain sampler cuts it into chunks of
/// `batch_size` (the tail may be smaller); load-shuffle-split cuts it into
/// super-batches of `m·batch_size` and emits each plan's non-empty batches.
pub fn iterate_epoch(
    labels: &[usize],
    n_categories: usize,
    batch_size: usize,
    sampler: SamplerKind,
    seed: u64,
) -> Result<EpochBatches> {
    if labels.is_empty() {
        return Err(Error::Config("cannot iterate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut plans = 0;
    match sampler {
        SamplerKind::Plain => batches.extend(order.chunks(batch_size).map(|c| c.to_vec())),
        SamplerKind::LoadShuffleSplit { categories_per_batch } => {
            let m = batches_per_plan(n_categories, categories_per_batch)?;
            for chunk in order.chunks(m * batch_size) {
                let plan = split_loaded(labels, chunk.to_vec(), n_categories, categories_per_batch, &mut rng)?;
                plans += 1;
                for (t, b) in plan.batches.into_iter().enumerate() {
                    if b.is_empty() {
                        log::warn!(
                            "dropping empty batch {t} of plan {plans}: no loaded sample has category in {:?}",
                            plan.category_lists[t]
                        );
                    } else {
                        batches.push(b);
                    }
                }
            }
        }
    }
    Ok(EpochBatches {
        batches: batches.into_iter(),
        plans,
    })
}

/// Iterator over the batches of one epoch.
#[derive(Debug, Clone)]
pub struct EpochBatches {
    batches: vec::IntoIter<Vec<usize>>,
    plans: usize,
}

impl EpochBatches {
    /// Super-batch plans built for this epoch (0 for the plain sampler).
    pub fn plans(&self) -> usize {
        self.plans
    }
}

impl Iterator for EpochBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        self.batches.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for EpochBatches {}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar100_labels() -> Vec<usize> {
        (0..50_000).map(|i| i % 100).collect()
    }

    #[test]
    fn four_categories_two_batches() {
        // N = 4, b = 4, c = 2, 8 loaded samples
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let plan = plan_super_batch(&labels, 4, 4, 2, 7).unwrap();
        assert_eq!(plan.loaded_indices.len(), 8);
        assert_eq!(plan.category_lists.len(), 2);
        assert_eq!(plan.batches.len(), 2);
        for (list, batch) in plan.category_lists.iter().zip(&plan.batches) {
            assert_eq!(list.len(), 2);
            assert_eq!(batch.len(), 4);
            assert!(batch.iter().all(|&s| list.contains(&labels[s])));
        }
    }

    #[test]
    fn c_equal_n_is_a_single_batch() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let plan = plan_super_batch(&labels, 10, 16, 10, 3).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].len(), 16);
    }

    #[test]
    fn cifar100_shape() {
        let labels = cifar100_labels();
        let plan = plan_super_batch(&labels, 100, 128, 25, 11).unwrap();
        assert_eq!(plan.n_batches(), 4);
        assert_eq!(plan.loaded_indices.len(), 512);
        let sizes: usize = plan.batches.iter().map(Vec::len).sum();
        assert_eq!(sizes, 512);
    }

    #[test]
    fn c_larger_than_n_rejected() {
        assert!(matches!(plan_super_batch(&[0, 1], 2, 2, 3, 0), Err(Error::Config(_))));
        assert!(plan_super_batch(&[0, 1], 2, 2, 0, 0).is_err());
    }

    #[test]
    fn plain_epoch_counts() {
        let labels = vec![0; 50_000];
        let batches: Vec<_> = iterate_epoch(&labels, 1, 128, SamplerKind::Plain, 0).unwrap().collect();
        assert_eq!(batches.len(), 391);
        assert_eq!(batches.last().unwrap().len(), 80);
    }

    #[test]
    fn epoch_restriction_and_determinism() {
        let labels = cifar100_labels();
        let kind = SamplerKind::LoadShuffleSplit { categories_per_batch: 25 };
        let a: Vec<_> = iterate_epoch(&labels, 100, 128, kind, 5).unwrap().collect();
        let b: Vec<_> = iterate_epoch(&labels, 100, 128, kind, 5).unwrap().collect();
        assert_eq!(a, b);
        let mut seen = vec![false; labels.len()];
        for batch in &a {
            for &s in batch {
                assert!(!seen[s], "sample {s} used twice");
                seen[s] = true;
            }
            // at most 25 categories in any batch
            let mut cats: Vec<usize> = batch.iter().map(|&s| labels[s]).collect();
            cats.sort_unstable();
            cats.dedup();
            assert!(cats.len() <= 25);
        }
        assert!(seen.iter().all(|&s| s));
    }
}
