//! The training loop.
//!
//! Every random stream (sampler order, augmentation) is derived from the run
//! seed, the epoch and the batch index, so a run resumed from a checkpoint
//! replays exactly what the uninterrupted run would have done.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use dpn_core::data::{assemble_batch, AugmentPolicy, ImageSample};
use dpn_core::losses::{dpm_losses, total_loss, IndicatorMatrix};
use dpn_core::metrics::{coherence, Coherence, TopK};
use dpn_core::model::{build, Mode, Model};
use dpn_core::optim::{clip_grad_norm, sgd_step};
use dpn_core::sampler::{batches_per_plan, iterate_epoch, SamplerKind};
use dpn_core::{Graph, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, BestSoFar, RngState, TrainState};
use crate::config::RunConfig;
use crate::dataset::{resolve_stats, Dataset};
use crate::error::{Result, RunError};

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints").join("best")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Assemble batches inline instead of on a prefetch thread.
    pub deterministic: bool,
    /// Continue from the latest checkpoint when there is one.
    pub resume: bool,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub l_explicit: f64,
    pub l_consistent: f64,
    pub l_balance: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Rows written by this invocation.
    pub records: Vec<EpochRecord>,
    pub completed_epochs: usize,
    pub steps: u64,
    pub best: Option<BestSoFar>,
    /// Final-DPM coherence on the test split after the last epoch run here.
    pub coherence: Option<Coherence>,
}

const SAMPLER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// splitmix64 over `(seed, stream, epoch, index)`.
pub fn stream_seed(seed: u64, stream: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed;
    for part in [stream, epoch as u64, index as u64] {
        z = z.wrapping_add(part.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RunError::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| RunError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_metrics(path: &Path, rows: &[EpochRecord], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| RunError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    if fresh && rows.is_empty() {
        w.write_record(["epoch", "lr", "ce", "l_explicit", "l_consistent", "l_balance", "top1", "top5"])
            .map_err(|e| RunError::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| RunError::io(path, e))
}

/// Runs the model in eval mode over `samples` in order and hands each batch's
/// logits and decisions to `visit` along with the index of its first sample.
pub fn forward_eval<T: Real>(
    model: &Model<T>,
    samples: &[ImageSample],
    policy: &AugmentPolicy,
    batch_size: usize,
    mut visit: impl FnMut(usize, &Tensor<T>, &[Tensor<T>]),
) -> Result<()> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    for (c, chunk) in idx.chunks(batch_size).enumerate() {
        let (x, _) = assemble_batch::<T, ChaCha8Rng>(samples, chunk, policy, None);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.input(x);
        let out = model.forward(&mut g, &vars, xv, Mode::Eval)?;
        let decisions: Vec<Tensor<T>> = out.decisions.iter().map(|&d| g.value(d).clone()).collect();
        visit(c * batch_size, g.value(out.logits), &decisions);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub acc: TopK,
    pub coherence: Option<Coherence>,
}

/// Top-1/top-5 and the final DPM's first-score coherence over fine labels.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[ImageSample], policy: &AugmentPolicy, batch_size: usize) -> Result<EvalResult> {
    let mut acc = TopK::default();
    let mut scores = Vec::with_capacity(samples.len());
    forward_eval(model, samples, policy, batch_size, |start, logits, decisions| {
        let labels: Vec<usize> = samples[start..start + logits.shape()[0]].iter().map(|s| s.label).collect();
        acc.update(logits, &labels);
        if let Some(last) = decisions.last() {
            let n = last.shape()[1];
            scores.extend(last.data().iter().step_by(n).map(|v| v.to_f64_lossy()));
        }
    })?;
    let coherence = (!scores.is_empty()).then(|| {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        coherence(&scores, &labels)
    });
    Ok(EvalResult { acc, coherence })
}

struct EpochTotals {
    seen: usize,
    ce: f64,
    explicit: f64,
    consistent: f64,
    balance: f64,
}

/// Trains per `cfg`, writing metrics, checkpoints and the resolved config into
/// `cfg.output_dir`.
pub fn train<T: Real>(cfg: &RunConfig, data: &Dataset, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let paths = RunPaths::new(&cfg.output_dir);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| RunError::io(&cfg.output_dir, e))?;
    let stats = resolve_stats(cfg, data)?;
    let policy = cfg.augment_policy(&stats);
    policy.validate(dpn_core::data::SIDE, dpn_core::data::SIDE)?;
    let model = build::<T>(&cfg.model_spec(), cfg.seed)?;
    let hash = cfg.hash();

    let mut state = if opts.resume && paths.latest().join("manifest.json").exists() {
        let (st, info) = checkpoint::load(&paths.latest(), model)?;
        if info.config_hash != hash {
            return Err(RunError::Mismatch(format!(
                "{} was written under a different config (hash {} vs {hash})",
                paths.latest().display(),
                info.config_hash
            )));
        }
        let kept: Vec<EpochRecord> = match paths.metrics().exists() {
            true => read_metrics(&paths.metrics())?.into_iter().filter(|r| r.epoch < st.epoch).collect(),
            false => Vec::new(),
        };
        write_metrics(&paths.metrics(), &kept, false)?;
        log::info!("resuming after epoch {} ({} steps)", st.epoch, st.steps);
        st
    } else {
        let ck = cfg.output_dir.join("checkpoints");
        if ck.exists() {
            fs::remove_dir_all(&ck).map_err(|e| RunError::io(&ck, e))?;
        }
        write_metrics(&paths.metrics(), &[], false)?;
        let velocity = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            model,
            velocity,
            epoch: 0,
            steps: 0,
            rng: RngState { seed: cfg.seed, next_epoch: 0 },
            best: None,
        }
    };
    fs::write(paths.config(), cfg.to_json() + "\n").map_err(|e| RunError::io(&paths.config(), e))?;

    let names = state.model.params().names().to_vec();
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let weights = tc.loss_weights;
    let mut summary = RunSummary {
        records: Vec::new(),
        completed_epochs: state.epoch,
        steps: state.steps,
        best: state.best.clone(),
        coherence: None,
    };

    for epoch in state.epoch..tc.epochs {
        if opts.stop_after.is_some_and(|s| epoch >= s) {
            log::info!("stopping after epoch {epoch} as requested");
            break;
        }
        let started = Instant::now();
        let lr = tc.lr_at(epoch);
        let batches: Vec<Vec<usize>> = {
            let it = iterate_epoch(&labels, data.n_classes, tc.batch_size, tc.sampler, stream_seed(cfg.seed, SAMPLER_STREAM, epoch, 0))?;
            if let SamplerKind::LoadShuffleSplit { categories_per_batch } = tc.sampler {
                let m = batches_per_plan(data.n_classes, categories_per_batch)?;
                log::info!("epoch {epoch}: load_shuffle_split m={m} batches per plan, {} plans", it.plans());
            }
            it.collect()
        };
        let make_batch = |i: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, AUGMENT_STREAM, epoch, i));
            assemble_batch::<T, _>(&data.train, &batches[i], &policy, Some(&mut rng))
        };
        let mut totals = EpochTotals {
            seen: 0,
            ce: 0.0,
            explicit: 0.0,
            consistent: 0.0,
            balance: 0.0,
        };
        let mut step = |x: Tensor<T>, y: Vec<usize>| -> Result<()> {
            let mut g = Graph::new();
            let vars = state.model.bind(&mut g);
            let xv = g.input(x);
            let out = state.model.forward(&mut g, &vars, xv, Mode::Train)?;
            let ce = g.cross_entropy(out.logits, &y)?;
            let ind = IndicatorMatrix::new(&y, data.n_classes)?;
            let parts = out
                .decisions
                .iter()
                .map(|&d| dpm_losses(&mut g, d, &ind, weights.delta))
                .collect::<dpn_core::Result<Vec<_>>>()?;
            let loss = total_loss(&mut g, ce, &parts, &weights)?;
            let lv = g.value(loss).item().to_f64_lossy();
            if !lv.is_finite() {
                let at = g.first_non_finite().map_or(String::new(), |v| format!(", first non-finite node {}", v.index()));
                return Err(RunError::Core(dpn_core::Error::NonFinite(format!(
                    "total loss {lv} at epoch {epoch} step {}{at}",
                    state.steps
                ))));
            }
            let b = y.len() as f64;
            totals.seen += y.len();
            totals.ce += b * g.value(ce).item().to_f64_lossy();
            if !parts.is_empty() {
                let k = parts.len() as f64;
                let mean = |f: &dyn Fn(&dpn_core::losses::DpmLosses) -> dpn_core::Var| {
                    parts.iter().map(|p| g.value(f(p)).item().to_f64_lossy()).sum::<f64>() / k
                };
                totals.explicit += b * mean(&|p| p.explicit);
                totals.consistent += b * mean(&|p| p.consistent);
                totals.balance += b * mean(&|p| p.balance);
            }
            let mut grads = g.backward(loss)?;
            let mut gs: Vec<Tensor<T>> = vars.iter().map(|&v| grads.take(v)).collect();
            if let Some(c) = tc.grad_clip {
                clip_grad_norm(&mut gs, c);
            }
            sgd_step(state.model.params_mut().tensors_mut(), &gs, &mut state.velocity, &names, lr, tc.momentum, tc.weight_decay)?;
            state.model.update_running_stats(&out.bn_stats);
            state.steps += 1;
            Ok(())
        };

        if opts.deterministic {
            for i in 0..batches.len() {
                let (x, y) = make_batch(i);
                step(x, y)?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(2);
                let make = &make_batch;
                let n = batches.len();
                s.spawn(move || {
                    for i in 0..n {
                        if tx.send(make(i)).is_err() {
                            break;
                        }
                    }
                });
                for (x, y) in rx {
                    step(x, y)?;
                }
                Ok(())
            })?;
        }

        let eval = evaluate(&state.model, &data.test, &policy, cfg.eval_batch_size)?;
        let n = totals.seen.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            ce: totals.ce / n,
            l_explicit: totals.explicit / n,
            l_consistent: totals.consistent / n,
            l_balance: totals.balance / n,
            top1: eval.acc.top1_rate(),
            top5: eval.acc.top5_rate(),
        };
        write_metrics(&paths.metrics(), std::slice::from_ref(&record), true)?;
        state.epoch = epoch + 1;
        state.rng.next_epoch = epoch + 1;
        let improved = state.best.as_ref().is_none_or(|b| record.top1 > b.top1);
        if improved {
            state.best = Some(BestSoFar { epoch, top1: record.top1 });
            checkpoint::save(&paths.best(), &state, &hash, tc.momentum, tc.weight_decay)?;
        }
        checkpoint::save(&paths.latest(), &state, &hash, tc.momentum, tc.weight_decay)?;
        log::info!(
            "epoch {epoch} lr {lr} ce {:.4} explicit {:.4} consistent {:.5} balance {:.3} top1 {:.4} top5 {:.4} ({:.1}s)",
            record.ce,
            record.l_explicit,
            record.l_consistent,
            record.l_balance,
            record.top1,
            record.top5,
            started.elapsed().as_secs_f64()
        );
        summary.records.push(record);
        summary.coherence = eval.coherence;
    }
    summary.completed_epochs = state.epoch;
    summary.steps = state.steps;
    summary.best = state.best;
    Ok(summary)
}

/// Builds the configured model and fills it from a checkpoint directory.
pub fn load_model<T: Real>(cfg: &RunConfig, dir: &Path) -> Result<Model<T>> {
    let model = build::<T>(&cfg.model_spec(), cfg.seed)?;
    let (state, info) = checkpoint::load(dir, model)?;
    if info.config_hash != cfg.hash() {
        log::warn!("{} was written under a different config hash", dir.display());
    }
    Ok(state.model)
}
