//! Dataset loading and the channel-statistics manifest.

use std::fs;
use std::path::Path;

use dpn_core::data::{self, ChannelStats, CifarVariant, ImageSample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(RunError::Config(format!("split must be train or test, got {other:?}"))),
        }
    }
}

fn split_files(variant: CifarVariant, split: Split) -> &'static [&'static str] {
    match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        (CifarVariant::Cifar10, Split::Test) => &["test_batch.bin"],
        (CifarVariant::Cifar100, Split::Train) => &["train.bin"],
        (CifarVariant::Cifar100, Split::Test) => &["test.bin"],
    }
}

/// Reads the standard binary batch files of one split.
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    for name in split_files(variant, split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| RunError::io(&path, e))?;
        let samples = data::decode_cifar(&bytes, variant)
            .map_err(|e| RunError::Format(format!("{}: {e}", path.display())))?;
        out.extend(samples);
    }
    Ok(out)
}

/// Both splits of the configured dataset, limits applied.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (mut train, mut test) = match cfg.cifar_variant() {
            Some(v) => {
                let dir = cfg.data_dir.as_deref().expect("validated config has data.dir");
                (load_cifar(dir, v, Split::Train)?, load_cifar(dir, v, Split::Test)?)
            }
            None => (
                data::gen_synthetic(cfg.synthetic_train, cfg.data_seed)?,
                data::gen_synthetic(cfg.synthetic_test, cfg.data_seed.wrapping_add(1))?,
            ),
        };
        if let Some(n) = cfg.train_limit {
            train.truncate(n);
        }
        if let Some(n) = cfg.test_limit {
            test.truncate(n);
        }
        let n_classes = cfg.n_classes();
        if let Some(s) = train.iter().chain(&test).find(|s| s.label >= n_classes) {
            return Err(RunError::Format(format!("label {} outside 0..{n_classes}", s.label)));
        }
        Ok(Dataset { train, test, n_classes })
    }

    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsManifest {
    mean: [f64; 3],
    std: [f64; 3],
    n_samples: usize,
}

/// `{"mean":[r,g,b],"std":[r,g,b],"n_samples":n}`, pretty-printed.
pub fn stats_json(stats: &ChannelStats) -> String {
    let m = StatsManifest {
        mean: stats.mean,
        std: stats.std,
        n_samples: stats.n_samples,
    };
    serde_json::to_string_pretty(&m).expect("stats serialize")
}

pub fn write_stats(path: &Path, stats: &ChannelStats) -> Result<()> {
    let text = stats_json(stats);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| RunError::io(path, e))
}

pub fn read_stats(path: &Path) -> Result<ChannelStats> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let m: StatsManifest =
        serde_json::from_str(&text).map_err(|e| RunError::Format(format!("{}: {e}", path.display())))?;
    if m.std.iter().any(|&s| !(s > 0.0)) {
        return Err(RunError::Format(format!("{}: std components must be positive", path.display())));
    }
    Ok(ChannelStats {
        mean: m.mean,
        std: m.std,
        n_samples: m.n_samples,
    })
}

/// Statistics of the training split, read from `data.stats` when that file
/// exists and computed (then cached there) otherwise.
pub fn resolve_stats(cfg: &RunConfig, ds: &Dataset) -> Result<ChannelStats> {
    match &cfg.stats_path {
        Some(p) if p.exists() => read_stats(p),
        Some(p) => {
            let s = data::channel_stats(&ds.train)?;
            write_stats(p, &s)?;
            log::info!("wrote dataset statistics to {}", p.display());
            Ok(s)
        }
        None => Ok(data::channel_stats(&ds.train)?),
    }
}
