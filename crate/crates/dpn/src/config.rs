//! The flat run configuration.
//!
//! Keys are dotted paths such as `model.preset` or `train.lr0`. A config file
//! is a JSON object holding any subset of them; missing keys take their
//! defaults, unknown keys are rejected, and `--set key=value` overrides are
//! applied on top.

use std::path::{Path, PathBuf};

use dpn_core::data::{AugmentPolicy, ChannelStats, CifarVariant};
use dpn_core::dpm::{DpmConfig, HeadLayers};
use dpn_core::losses::LossWeights;
use dpn_core::model::{ModelSpec, Preset};
use dpn_core::optim::TrainConfig;
use dpn_core::sampler::SamplerKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "model.preset")]
    pub preset: String,
    #[serde(rename = "model.with_dpm")]
    pub with_dpm: bool,
    #[serde(rename = "model.n_aux")]
    pub n_aux: usize,
    #[serde(rename = "model.reduction")]
    pub reduction: usize,
    #[serde(rename = "model.head_layers")]
    pub head_layers: String,
    #[serde(rename = "model.width")]
    pub width: usize,
    #[serde(rename = "model.dpm_sites")]
    pub dpm_sites: Option<Vec<usize>>,

    /// `synthetic`, `cifar10` or `cifar100`.
    #[serde(rename = "data.dataset")]
    pub dataset: String,
    #[serde(rename = "data.dir")]
    pub data_dir: Option<PathBuf>,
    #[serde(rename = "data.synthetic_train")]
    pub synthetic_train: usize,
    #[serde(rename = "data.synthetic_test")]
    pub synthetic_test: usize,
    #[serde(rename = "data.seed")]
    pub data_seed: u64,
    /// Keep only the first `n` training samples.
    #[serde(rename = "data.train_limit")]
    pub train_limit: Option<usize>,
    #[serde(rename = "data.test_limit")]
    pub test_limit: Option<usize>,
    /// Channel statistics manifest; computed from the training split and
    /// written here when the file does not exist yet.
    #[serde(rename = "data.stats")]
    pub stats_path: Option<PathBuf>,

    #[serde(rename = "train.epochs")]
    pub epochs: usize,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.lr0")]
    pub lr0: f64,
    #[serde(rename = "train.lr_milestones")]
    pub lr_milestones: Vec<usize>,
    #[serde(rename = "train.lr_gamma")]
    pub lr_gamma: f64,
    #[serde(rename = "train.momentum")]
    pub momentum: f64,
    #[serde(rename = "train.weight_decay")]
    pub weight_decay: f64,
    #[serde(rename = "train.seed")]
    pub seed: u64,
    #[serde(rename = "train.grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(rename = "eval.batch_size")]
    pub eval_batch_size: usize,

    #[serde(rename = "loss.lambda_explicit")]
    pub lambda_explicit: f64,
    #[serde(rename = "loss.lambda_consistent")]
    pub lambda_consistent: f64,
    #[serde(rename = "loss.lambda_balance")]
    pub lambda_balance: f64,
    #[serde(rename = "loss.delta")]
    pub delta: f64,

    /// `plain` or `load_shuffle_split`.
    pub sampler: String,
    /// Categories per batch for `load_shuffle_split`.
    #[serde(rename = "sampler.c")]
    pub sampler_c: usize,

    #[serde(rename = "augment.pad")]
    pub pad: usize,
    #[serde(rename = "augment.crop")]
    pub crop: usize,
    #[serde(rename = "augment.hflip_prob")]
    pub hflip_prob: f64,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        RunConfig {
            preset: "resnet20".into(),
            with_dpm: true,
            n_aux: DpmConfig::DEFAULT_N_AUX,
            reduction: DpmConfig::DEFAULT_REDUCTION,
            head_layers: HeadLayers::Two.name().into(),
            width: 16,
            dpm_sites: None,
            dataset: "synthetic".into(),
            data_dir: None,
            synthetic_train: 4000,
            synthetic_test: 1000,
            data_seed: 0,
            train_limit: None,
            test_limit: None,
            stats_path: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_milestones: t.lr_milestones,
            lr_gamma: t.lr_gamma,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: t.seed,
            grad_clip: t.grad_clip,
            eval_batch_size: 250,
            lambda_explicit: w.lambda_explicit,
            lambda_consistent: w.lambda_consistent,
            lambda_balance: w.lambda_balance,
            delta: w.delta,
            sampler: "plain".into(),
            sampler_c: 25,
            pad: 4,
            crop: 32,
            hflip_prob: 0.5,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| RunError::Config(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim();
    // bare words are taken as strings so `--set model.preset=nin` works unquoted
    let value = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
    Ok((key.to_string(), value))
}

fn config_err<E: std::fmt::Display>(key: &str) -> impl FnOnce(E) -> RunError + '_ {
    move |e| RunError::Config(format!("{key}: {e}"))
}

impl RunConfig {
    /// Applies `entries` over the defaults, naming the first offending key.
    pub fn from_map(entries: Map<String, Value>) -> Result<Self> {
        let defaults = match serde_json::to_value(RunConfig::default()).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        if let Some(bad) = entries.keys().find(|k| !defaults.contains_key(*k)) {
            return Err(RunError::Config(format!("{bad}: unknown key")));
        }
        for (k, v) in &entries {
            let mut single = defaults.clone();
            single.insert(k.clone(), v.clone());
            serde_json::from_value::<RunConfig>(Value::Object(single)).map_err(config_err(k))?;
        }
        let mut merged = defaults;
        merged.extend(entries);
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| RunError::io(p, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(RunError::Config(format!("{}: config must be a JSON object", p.display()))),
                    Err(e) => return Err(RunError::Config(format!("{}: {e}", p.display()))),
                }
            }
            None => Map::new(),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            entries.insert(k, v);
        }
        Self::from_map(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn n_classes(&self) -> usize {
        match self.dataset.as_str() {
            "cifar10" => 10,
            "cifar100" => 100,
            _ => dpn_core::data::SYNTHETIC_CLASSES,
        }
    }

    pub fn cifar_variant(&self) -> Option<CifarVariant> {
        match self.dataset.as_str() {
            "cifar10" => Some(CifarVariant::Cifar10),
            "cifar100" => Some(CifarVariant::Cifar100),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, msg: String| Err(RunError::Config(format!("{k}: {msg}")));
        let preset: Preset = self.preset.parse().map_err(config_err("model.preset"))?;
        let _: HeadLayers = self.head_layers.parse().map_err(config_err("model.head_layers"))?;
        if !matches!(self.dataset.as_str(), "synthetic" | "cifar10" | "cifar100") {
            return fail("data.dataset", format!("expected synthetic, cifar10 or cifar100, got {:?}", self.dataset));
        }
        if self.cifar_variant().is_some() && self.data_dir.is_none() {
            return fail("data.dir", format!("required for dataset {}", self.dataset));
        }
        if self.dataset == "synthetic" && (self.synthetic_train < 8 || self.synthetic_test < 8) {
            return fail("data.synthetic_train", "synthetic splits need at least 8 samples".into());
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return fail("data.train_limit", "limits must be positive".into());
        }
        if self.n_aux < 2 {
            return fail("model.n_aux", format!("must be >= 2, got {}", self.n_aux));
        }
        if self.reduction == 0 {
            return fail("model.reduction", "must be >= 1".into());
        }
        if let Some(sites) = &self.dpm_sites {
            if let Some(bad) = sites.iter().find(|&&s| s >= preset.site_count()) {
                return fail(
                    "model.dpm_sites",
                    format!("site {bad} out of range, {} has {} sites", preset.name(), preset.site_count()),
                );
            }
        }
        if self.eval_batch_size == 0 {
            return fail("eval.batch_size", "must be positive".into());
        }
        match self.sampler.as_str() {
            "plain" => {}
            "load_shuffle_split" => {
                let n = self.n_classes();
                if self.sampler_c == 0 || self.sampler_c > n {
                    return fail("sampler.c", format!("must be in 1..={n} for {}, got {}", self.dataset, self.sampler_c));
                }
            }
            other => return fail("sampler", format!("expected plain or load_shuffle_split, got {other:?}")),
        }
        self.model_spec().validate().map_err(config_err("model"))?;
        self.train_config().validate().map_err(config_err("train"))?;
        self.augment_policy(&ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            n_samples: 0,
        })
        .validate(dpn_core::data::SIDE, dpn_core::data::SIDE)
        .map_err(config_err("augment"))?;
        Ok(())
    }

    /// Requires a validated config.
    pub fn model_spec(&self) -> ModelSpec {
        let preset = self.preset.parse().unwrap_or(Preset::Resnet20);
        let mut spec = ModelSpec::new(preset, self.with_dpm, self.n_classes());
        spec.width = self.width;
        spec.dpm_sites = self.dpm_sites.clone();
        spec.dpm.n_aux = self.n_aux;
        spec.dpm.reduction = self.reduction;
        spec.dpm.head_layers = self.head_layers.parse().unwrap_or_default();
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_milestones: self.lr_milestones.clone(),
            lr_gamma: self.lr_gamma,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            loss_weights: LossWeights {
                lambda_explicit: self.lambda_explicit,
                lambda_consistent: self.lambda_consistent,
                lambda_balance: self.lambda_balance,
                delta: self.delta,
            },
            sampler: match self.sampler.as_str() {
                "load_shuffle_split" => SamplerKind::LoadShuffleSplit {
                    categories_per_batch: self.sampler_c,
                },
                _ => SamplerKind::Plain,
            },
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    pub fn augment_policy(&self, stats: &ChannelStats) -> AugmentPolicy {
        AugmentPolicy {
            pad: self.pad,
            crop: self.crop,
            hflip_prob: self.hflip_prob,
            mean: stats.mean,
            std: stats.std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_pinned() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let spec = cfg.model_spec();
        assert_eq!(spec.preset, Preset::Resnet20);
        assert!(spec.with_dpm);
        assert_eq!((spec.dpm.n_aux, spec.dpm.reduction), (2, 16));
        assert_eq!(cfg.dataset, "synthetic");
        assert_eq!(cfg.train_config().loss_weights, LossWeights::uniform(0.1));
    }

    #[test]
    fn unknown_key_rejected() {
        let mut m = Map::new();
        m.insert("model.depth".into(), Value::from(3));
        let err = RunConfig::from_map(m).unwrap_err();
        assert!(err.to_string().starts_with("model.depth"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_type_names_the_field() {
        let err = RunConfig::load(None, &["train.epochs=lots".into()]).unwrap_err();
        assert!(err.to_string().starts_with("train.epochs:"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.with_dpm=false".into(),
                "model.preset=nin".into(),
                "train.lr_milestones=[2,4]".into(),
                "train.epochs=6".into(),
            ],
        )
        .unwrap();
        assert!(!cfg.with_dpm);
        assert_eq!(cfg.preset, "nin");
        assert_eq!(cfg.lr_milestones, [2, 4]);
    }

    #[test]
    fn semantic_errors() {
        for o in [
            "model.preset=vgg13",
            "train.lr0=0",
            "sampler=random",
            "train.lr_milestones=[300]",
            "augment.crop=64",
            "data.dataset=cifar10",
        ] {
            let err = RunConfig::load(None, &[o.into()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{o}: {err}");
        }
        let err = RunConfig::load(None, &["sampler=load_shuffle_split".into(), "sampler.c=25".into()]).unwrap_err();
        assert!(err.to_string().starts_with("sampler.c"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::load(None, &["train.grad_clip=5.0".into(), "model.dpm_sites=[0,2]".into()]).unwrap();
        let back: Map<String, Value> = serde_json::from_str(&cfg.to_json()).unwrap();
        let again = RunConfig::from_map(back).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }
}
