//! The decision propagation module.
//!
//! A DPM pools a feature map `U` to channel statistics, classifies them into
//! `n` auxiliary categories with a small fully connected head, and appends the
//! resulting soft decision to a target map `V` as `n` constant planes.

use num_traits::Float;
use alloc::format;
use core::str::FromStr;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Depth of the fully connected decision head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadLayers {
    One,
    #[default]
    Two,
}

impl HeadLayers {
    pub fn name(self) -> &'static str {
        match self {
            HeadLayers::One => "one",
            HeadLayers::Two => "two",
        }
    }
}

impl FromStr for HeadLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(HeadLayers::One),
            "two" => Ok(HeadLayers::Two),
            other => Err(Error::Config(format!("head_layers must be \"one\" or \"two\", got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpmConfig {
    /// Number of auxiliary categories.
    pub n_aux: usize,
    /// Bottleneck divisor of the first FC layer.
    pub reduction: usize,
    pub head_layers: HeadLayers,
    /// Channels of the pooled feature map.
    pub in_channels: usize,
}

impl DpmConfig {
    pub const DEFAULT_N_AUX: usize = 2;
    pub const DEFAULT_REDUCTION: usize = 16;

    pub fn new(in_channels: usize) -> Self {
        DpmConfig {
            n_aux: Self::DEFAULT_N_AUX,
            reduction: Self::DEFAULT_REDUCTION,
            head_layers: HeadLayers::Two,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_aux < 2 {
            return Err(Error::Config(format!("n_aux must be >= 2, got {}", self.n_aux)));
        }
        if self.reduction < 1 {
            return Err(Error::Config("reduction must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the bottleneck, `max(1, C / reduction)`.
    pub fn hidden_width(&self) -> usize {
        (self.in_channels / self.reduction).max(1)
    }

    /// `(fan_in, fan_out)` of each FC layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.head_layers {
            HeadLayers::One => alloc::vec![(self.in_channels, self.n_aux)],
            HeadLayers::Two => {
                let h = self.hidden_width();
                alloc::vec![(self.in_channels, h), (h, self.n_aux)]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Head weights: one `(w[in,out], b[out])` pair per FC layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmParams<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> DpmParams<T> {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &DpmConfig, rng: &mut R) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| (he_normal(&[fan_in, fan_out], fan_in, rng), Tensor::zeros(&[fan_out])))
            .collect();
        DpmParams { layers }
    }

    pub fn zeros(cfg: &DpmConfig) -> Self {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(i, o)| (Tensor::zeros(&[i, o]), Tensor::zeros(&[o])))
            .collect();
        DpmParams { layers }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DpmVars {
        DpmVars {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (g.param(w.clone()), g.param(b.clone())))
                .collect(),
        }
    }
}

/// Graph handles of a decision head, `(weight, bias)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmVars {
    pub layers: Vec<(Var, Var)>,
}

/// Normal(0, sqrt(2 / fan_in)) entries.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = Float::sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Soft decision `[B,n]` for a feature map `u[B,C,H,W]`:
/// GAP, then the FC head (ReLU between layers), then softmax.
pub fn dpm_decide<T: Real>(g: &mut Graph<T>, u: Var, cfg: &DpmConfig, head: &DpmVars) -> Result<Var> {
    let shape = g.shape(u).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("dpm_decide expects [B,C,H,W], got {shape:?}")));
    }
    if shape[1] != cfg.in_channels {
        return Err(Error::Config(format!(
            "DPM configured for {} channels but the feature map has {}",
            cfg.in_channels, shape[1]
        )));
    }
    if head.layers.len() != cfg.layer_dims().len() {
        return Err(Error::Config(format!(
            "DPM head has {} layers, config expects {}",
            head.layers.len(),
            cfg.layer_dims().len()
        )));
    }
    let mut h = g.global_avg_pool(u)?;
    let last = head.layers.len() - 1;
    for (i, &(w, b)) in head.layers.iter().enumerate() {
        h = g.linear(h, w, b)?;
        if i < last {
            h = g.relu(h);
        }
    }
    g.softmax(h)
}

/// Appends each sample's decision to `v[B,Cv,H,W]` as `n` constant planes.
pub fn dpm_propagate<T: Real>(g: &mut Graph<T>, d: Var, v: Var) -> Result<Var> {
    let ds = g.shape(d).to_vec();
    let vs = g.shape(v).to_vec();
    if ds.len() != 2 || vs.len() != 4 {
        return Err(Error::Dimension(format!(
            "dpm_propagate expects decisions [B,n] and a map [B,C,H,W], got {ds:?} and {vs:?}"
        )));
    }
    if ds[0] != vs[0] {
        return Err(Error::shape("dpm_propagate", &ds, &vs));
    }
    let planes = g.expand_planes(d, vs[2], vs[3])?;
    g.concat_channels(v, planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_give_hidden_width_four_for_64_channels() {
        let cfg = DpmConfig::new(64);
        assert_eq!(cfg.n_aux, 2);
        assert_eq!(cfg.reduction, 16);
        assert_eq!(cfg.hidden_width(), 4);
        assert_eq!(cfg.layer_dims(), [(64, 4), (4, 2)]);
    }

    #[test]
    fn small_channel_counts_keep_one_hidden_unit() {
        assert_eq!(DpmConfig::new(8).hidden_width(), 1);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = DpmConfig::new(16);
        cfg.n_aux = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_aux = 2;
        cfg.reduction = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_and_channel_mismatch() {
        let cfg = DpmConfig::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DpmParams::<f64>::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let head = params.bind(&mut g);
        let u = g.input(Tensor::from_fn(&[3, 64, 2, 2], |i| (i % 7) as f64 - 3.0));
        let d = dpm_decide(&mut g, u, &cfg, &head).unwrap();
        assert_eq!(g.shape(d), &[3, 2]);

        let wrong = g.input(Tensor::zeros(&[3, 32, 2, 2]));
        assert!(matches!(dpm_decide(&mut g, wrong, &cfg, &head), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut cfg = DpmConfig::new(16);
        cfg.n_aux = 4;
        let params = DpmParams::<f64>::zeros(&cfg);
        let mut g = Graph::new();
        let head = params.bind(&mut g);
        let u = g.input(Tensor::from_fn(&[2, 16, 3, 3], |i| i as f64));
        let d = dpm_decide(&mut g, u, &cfg, &head).unwrap();
        assert!(g.value(d).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn one_hot_propagation() {
        let mut g = Graph::<f64>::new();
        let d = g.input(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let v = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64));
        let out = dpm_propagate(&mut g, d, v).unwrap();
        assert_eq!(g.shape(out), &[1, 5, 2, 2]);
        let o = g.value(out).data();
        assert_eq!(&o[..12], g.value(v).data());
        assert_eq!(&o[12..16], &[1.0; 4]);
        assert_eq!(&o[16..20], &[0.0; 4]);
    }

    #[test]
    fn uniform_propagation_and_extents() {
        let mut g = Graph::<f64>::new();
        let d = g.input(Tensor::full(&[2, 2], 0.5));
        let v = g.input(Tensor::ones(&[2, 16, 8, 8]));
        let out = dpm_propagate(&mut g, d, v).unwrap();
        assert_eq!(g.shape(out), &[2, 18, 8, 8]);
        let per = 18 * 64;
        for k in 0..2 {
            assert!(g.value(out).data()[k * per + 16 * 64..(k + 1) * per].iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn batch_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let d = g.input(Tensor::full(&[3, 2], 0.5));
        let v = g.input(Tensor::ones(&[2, 4, 2, 2]));
        assert!(matches!(dpm_propagate(&mut g, d, v), Err(Error::ShapeMismatch { .. })));
    }
}
