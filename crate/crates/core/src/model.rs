//! Backbones and their decision-propagation variants.
//!
//! - `plain-cnn`: three groups of conv3×3-BN-ReLU-maxpool, GAP, linear head.
//! - `nin`: three mlpconv groups (3×3, 1×1, 1×1), a 1×1 class-map conv, GAP.
//! - `resnet20` / `resnet56`: CIFAR ResNet with a 16-channel stem and three
//!   stages of 3 or 9 basic blocks at widths 16/32/64; stage transitions use a
//!   stride-2 conv and a 1×1 projection shortcut.
//!
//! In a DP residual unit the decision is computed from the unit input `U`,
//! expanded and concatenated to `U` right before the first conv of the
//! residual branch, which therefore takes `C + n` channels. The shortcut
//! always sees the plain `U`. In the plain and NIN variants a DPM sits after
//! each selected conv group and its decision is concatenated to that group's
//! output, which feeds the next group (or the classifier).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dpm::{dpm_decide, dpm_propagate, he_normal, DpmConfig, DpmVars};
use crate::graph::{BatchStats, BnMode};
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Running-statistics momentum of every batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    PlainCnn,
    Nin,
    Resnet20,
    Resnet56,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::PlainCnn => "plain-cnn",
            Preset::Nin => "nin",
            Preset::Resnet20 => "resnet20",
            Preset::Resnet56 => "resnet56",
        }
    }

    /// Places a DPM can be attached to: conv groups or residual units.
    pub fn site_count(self) -> usize {
        match self {
            Preset::PlainCnn | Preset::Nin => 3,
            Preset::Resnet20 => 9,
            Preset::Resnet56 => 27,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-cnn" => Ok(Preset::PlainCnn),
            "nin" => Ok(Preset::Nin),
            "resnet20" => Ok(Preset::Resnet20),
            "resnet56" => Ok(Preset::Resnet56),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub preset: Preset,
    pub with_dpm: bool,
    /// Template for every DPM; `in_channels` is filled in per site.
    pub dpm: DpmConfig,
    pub n_classes: usize,
    /// Base channel width (16 for the standard CIFAR ResNet).
    pub width: usize,
    /// Sites that receive a DPM; all of them when `None`.
    pub dpm_sites: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn new(preset: Preset, with_dpm: bool, n_classes: usize) -> Self {
        ModelSpec {
            preset,
            with_dpm,
            dpm: DpmConfig::new(0),
            n_classes,
            width: 16,
            dpm_sites: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if self.with_dpm {
            DpmConfig {
                in_channels: 1,
                ..self.dpm
            }
            .validate()?;
            if let Some(sites) = &self.dpm_sites {
                let n = self.preset.site_count();
                if let Some(&bad) = sites.iter().find(|&&s| s >= n) {
                    return Err(Error::Config(format!(
                        "DPM site {bad} out of range, {} has {n} sites",
                        self.preset.name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn has_dpm(&self, site: usize) -> bool {
        self.with_dpm && self.dpm_sites.as_ref().is_none_or(|s| s.contains(&site))
    }

    pub fn dpm_count(&self) -> usize {
        (0..self.preset.site_count()).filter(|&s| self.has_dpm(s)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Running statistics of one batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Dpm {
    cfg: DpmConfig,
    layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct ConvGroup {
    convs: Vec<(Conv, Bn)>,
    pool: bool,
    dpm: Option<Dpm>,
}

#[derive(Debug, Clone)]
struct ResUnit {
    dpm: Option<Dpm>,
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    shortcut: Option<(Conv, Bn)>,
}

#[derive(Debug, Clone)]
enum Arch {
    Groups {
        groups: Vec<ConvGroup>,
        head: Head,
    },
    Resnet {
        stem: (Conv, Bn),
        units: Vec<ResUnit>,
        head: Linear,
    },
}

#[derive(Debug, Clone)]
enum Head {
    Linear(Linear),
    ClassMaps(Conv),
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts<T> {
    pub logits: Var,
    /// One `[B,n]` decision batch per DPM, in depth order.
    pub decisions: Vec<Var>,
    /// Training-mode batch statistics, keyed by batch-norm index.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// A built network: parameters, batch-norm state and wiring.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    bn: Vec<BnState<T>>,
    dpm_params: Vec<usize>,
    arch: Arch,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    bn: Vec<BnState<T>>,
    dpm_params: Vec<usize>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = he_normal(&[cout, cin, k, k], cin * k * k, self.rng);
        let w = self.params.push(format!("{name}.w"), w);
        let bias = bias.then(|| self.params.push(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv {
            w,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.params.push(format!("{name}.gamma"), Tensor::ones(&[c]));
        let beta = self.params.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.bn.push(BnState {
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        });
        Bn {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = he_normal(&[fan_in, fan_out], fan_in, self.rng);
        let w = self.params.push(format!("{name}.w"), w);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn dpm(&mut self, name: &str, template: &DpmConfig, channels: usize) -> Dpm {
        let cfg = DpmConfig {
            in_channels: channels,
            ..*template
        };
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (fi, fo))| {
                let l = self.linear(&format!("{name}.dpm.fc{i}"), fi, fo);
                self.dpm_params.extend([l.w, l.b]);
                l
            })
            .collect();
        Dpm { cfg, layers }
    }
}

/// Builds a model with deterministic He-normal initialization.
pub fn build<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: ParamStore::new(),
        bn: Vec::new(),
        dpm_params: Vec::new(),
        rng: &mut rng,
    };
    let n = spec.dpm.n_aux;
    let extra = |site: usize| if spec.has_dpm(site) { n } else { 0 };
    let w = spec.width;
    let arch = match spec.preset {
        Preset::PlainCnn | Preset::Nin => {
            let widths = match spec.preset {
                Preset::PlainCnn => [w, 2 * w, 4 * w],
                _ => [2 * w, 4 * w, 4 * w],
            };
            let mut groups = Vec::new();
            let mut cin = 3;
            for (gi, &cout) in widths.iter().enumerate() {
                let name = format!("group{gi}");
                let mut convs = Vec::new();
                let kernels: &[usize] = if spec.preset == Preset::Nin { &[3, 1, 1] } else { &[3] };
                let mut c = cin;
                for (ci, &k) in kernels.iter().enumerate() {
                    let conv = b.conv(&format!("{name}.conv{ci}"), c, cout, k, 1, false);
                    let bn = b.bn(&format!("{name}.bn{ci}"), cout);
                    convs.push((conv, bn));
                    c = cout;
                }
                let pool = spec.preset == Preset::PlainCnn || gi < 2;
                let dpm = spec.has_dpm(gi).then(|| b.dpm(&name, &spec.dpm, cout));
                groups.push(ConvGroup { convs, pool, dpm });
                cin = cout + extra(gi);
            }
            let head = match spec.preset {
                Preset::PlainCnn => Head::Linear(b.linear("head", cin, spec.n_classes)),
                _ => Head::ClassMaps(b.conv("classifier", cin, spec.n_classes, 1, 1, true)),
            };
            Arch::Groups { groups, head }
        }
        Preset::Resnet20 | Preset::Resnet56 => {
            let per_stage = spec.preset.site_count() / 3;
            let stem = (b.conv("stem.conv", 3, w, 3, 1, false), b.bn("stem.bn", w));
            let mut units = Vec::new();
            let mut cin = w;
            for stage in 0..3 {
                let cout = w << stage;
                for u in 0..per_stage {
                    let site = stage * per_stage + u;
                    let name = format!("stage{stage}.unit{u}");
                    let stride = if stage > 0 && u == 0 { 2 } else { 1 };
                    let dpm = spec.has_dpm(site).then(|| b.dpm(&name, &spec.dpm, cin));
                    let conv1 = b.conv(&format!("{name}.conv1"), cin + extra(site), cout, 3, stride, false);
                    let bn1 = b.bn(&format!("{name}.bn1"), cout);
                    let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false);
                    let bn2 = b.bn(&format!("{name}.bn2"), cout);
                    let shortcut = (stride != 1 || cin != cout).then(|| {
                        (
                            b.conv(&format!("{name}.proj"), cin, cout, 1, stride, false),
                            b.bn(&format!("{name}.proj_bn"), cout),
                        )
                    });
                    units.push(ResUnit {
                        dpm,
                        conv1,
                        bn1,
                        conv2,
                        bn2,
                        shortcut,
                    });
                    cin = cout;
                }
            }
            let head = b.linear("head", cin, spec.n_classes);
            Arch::Resnet { stem, units, head }
        }
    };
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        bn: b.bn,
        dpm_params: b.dpm_params,
        arch,
    })
}

struct Fwd<'m, 'g, T> {
    model: &'m Model<T>,
    g: &'g mut Graph<T>,
    vars: &'m [Var],
    mode: Mode,
    decisions: Vec<Var>,
    bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> Fwd<'_, '_, T> {
    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let y = self.g.conv2d(x, self.vars[c.w], c.stride, c.pad)?;
        match c.bias {
            Some(b) => self.g.add_channel_bias(y, self.vars[b]),
            None => Ok(y),
        }
    }

    fn bn(&mut self, bn: &Bn, x: Var) -> Result<Var> {
        let st = &self.model.bn[bn.state];
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                running_mean: &st.running_mean,
                running_var: &st.running_var,
            },
        };
        let (y, stats) = self.g.batchnorm2d(x, self.vars[bn.gamma], self.vars[bn.beta], mode)?;
        if let Some(s) = stats {
            self.bn_stats.push((bn.state, s));
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, c: &Conv, bn: &Bn, x: Var) -> Result<Var> {
        let y = self.conv(c, x)?;
        let y = self.bn(bn, y)?;
        Ok(self.g.relu(y))
    }

    fn decide_and_propagate(&mut self, dpm: &Dpm, u: Var) -> Result<Var> {
        let head = DpmVars {
            layers: dpm.layers.iter().map(|l| (self.vars[l.w], self.vars[l.b])).collect(),
        };
        let d = dpm_decide(self.g, u, &dpm.cfg, &head)?;
        self.decisions.push(d);
        dpm_propagate(self.g, d, u)
    }

    fn unit(&mut self, u: &ResUnit, x: Var) -> Result<Var> {
        let branch_in = match &u.dpm {
            Some(dpm) => self.decide_and_propagate(dpm, x)?,
            None => x,
        };
        let h = self.conv_bn_relu(&u.conv1, &u.bn1, branch_in)?;
        let h = self.conv(&u.conv2, h)?;
        let h = self.bn(&u.bn2, h)?;
        let sc = match &u.shortcut {
            Some((c, bn)) => {
                let s = self.conv(c, x)?;
                self.bn(bn, s)?
            }
            None => x,
        };
        let y = self.g.add(h, sc)?;
        Ok(self.g.relu(y))
    }
}

impl<T: Real> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn dpm_count(&self) -> usize {
        match &self.arch {
            Arch::Groups { groups, .. } => groups.iter().filter(|g| g.dpm.is_some()).count(),
            Arch::Resnet { units, .. } => units.iter().filter(|u| u.dpm.is_some()).count(),
        }
    }

    /// Indices (into [`ParamStore`]) of every decision-head tensor.
    pub fn dpm_param_indices(&self) -> &[usize] {
        &self.dpm_params
    }

    /// Adds every parameter to the graph as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Runs the network on `x[B,3,H,W]` with vars from [`Model::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var, mode: Mode) -> Result<ForwardArtifacts<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} parameter vars bound for a model with {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] < 8 || shape[3] < 8 {
            return Err(Error::Dimension(format!(
                "model input must be [B,3,H,W] with H,W >= 8, got {shape:?}"
            )));
        }
        let mut f = Fwd {
            model: self,
            g,
            vars,
            mode,
            decisions: Vec::new(),
            bn_stats: Vec::new(),
        };
        let logits = match &self.arch {
            Arch::Groups { groups, head } => {
                let mut h = x;
                for grp in groups {
                    for (c, bn) in &grp.convs {
                        h = f.conv_bn_relu(c, bn, h)?;
                    }
                    if grp.pool {
                        h = f.g.maxpool2d(h, 2, 2)?;
                    }
                    if let Some(dpm) = &grp.dpm {
                        h = f.decide_and_propagate(dpm, h)?;
                    }
                }
                match head {
                    Head::Linear(l) => {
                        let p = f.g.global_avg_pool(h)?;
                        f.g.linear(p, vars[l.w], vars[l.b])?
                    }
                    Head::ClassMaps(c) => {
                        let m = f.conv(c, h)?;
                        f.g.global_avg_pool(m)?
                    }
                }
            }
            Arch::Resnet { stem, units, head } => {
                let mut h = f.conv_bn_relu(&stem.0, &stem.1, x)?;
                for u in units {
                    h = f.unit(u, h)?;
                }
                let p = f.g.global_avg_pool(h)?;
                f.g.linear(p, vars[head.w], vars[head.b])?
            }
        };
        Ok(ForwardArtifacts {
            logits,
            decisions: f.decisions,
            bn_stats: f.bn_stats,
        })
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - mom;
        for (idx, s) in stats {
            let st = &mut self.bn[*idx];
            for (r, &m) in st.running_mean.iter_mut().zip(&s.mean) {
                *r = keep * *r + mom * m;
            }
            for (r, &v) in st.running_var.iter_mut().zip(&s.var_unbiased) {
                *r = keep * *r + mom * v;
            }
        }
    }

    /// Sets every decision-head weight and bias to zero.
    pub fn zero_dpm_heads(&mut self) {
        for &i in &self.dpm_params {
            let t = &mut self.params.tensors[i];
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
