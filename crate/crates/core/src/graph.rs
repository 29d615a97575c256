//! Reverse-mode gradient tape.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its forward
//! value, the operation that produced it and whatever intermediates that
//! operation needs for its adjoint. Since inputs are always recorded before
//! their consumers, walking the list backwards is a reverse topological order
//! and each node is visited exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::real::gemm;
use crate::{Error, Real, Result, Tensor};

/// Lower clamp applied to every argument of `ln` in the engine.
pub const LOG_CLAMP: f64 = 1e-12;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SubScalarVar(Var, Var),
    Relu(Var),
    LnClamped(Var),
    SumAll(Var),
    SumRows(Var),
    Transpose(Var),
    Column(Var, usize),
    Reshape(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    ExpandPlanes(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode<'a, T> {
    Train,
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var_unbiased: Vec<T>,
}

/// The gradient tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    first_non_finite: Option<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First node whose value contains a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.first_non_finite.map(Var)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `a − s` where `s` is a one-element node broadcast over `a`.
    pub fn sub_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("sub_scalar_var", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x - sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::SubScalarVar(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `ln(max(x, 1e-12))`; the clamped region has zero gradient.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let floor = T::from_f64_lossy(LOG_CLAMP);
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(out, Op::LnClamped(a), rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Column sums of a 2-D tensor, `[r,c]` → `[1,c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.value(a).dims2("sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        let out = Tensor::new(&[1, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Column `j` of a 2-D tensor as `[r,1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let [r, c] = self.value(a).dims2("column")?;
        if j >= c {
            return Err(Error::Dimension(format!("column {j} of a {r}x{c} matrix")));
        }
        let src = self.value(a).data();
        let out = Tensor::new(&[r, 1], (0..r).map(|i| src[i * c + j]).collect())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Column(a, j), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `[r,c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [_, c] = self.value(a).dims2("add_row_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, &bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(a, bias), rg))
    }

    /// `x[B,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// `[B,C,H,W] + bias[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = self.value(a).dims4("add_channel_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_channel_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for (p, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let bj = b[p % c];
            plane.iter_mut().for_each(|v| *v += bj);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddChannelBias(a, bias), rg))
    }

    /// Softmax along the last axis of a 2-D tensor (a 1-D input is one row).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = match shape[..] {
            [n] | [_, n] => n,
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax expects a 1-D or 2-D tensor, got {shape:?}"
                )))
            }
        };
        let out = Tensor::new(&shape, kernels::softmax_rows(self.value(a).data(), n))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Mean cross-entropy of `logits[B,N]` against integer labels, with a
    /// fused log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, n] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Dimension(format!(
                "cross_entropy: label {bad} out of range for {n} classes"
            )));
        }
        let z = self.value(logits).data();
        let probs = kernels::softmax_rows(z, n);
        let mut total = T::zero();
        for (k, row) in z.chunks_exact(n).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[k]];
        }
        let out = Tensor::scalar(total / T::from_usize(b).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Zero-padded cross-correlation, `x[B,C,H,W]` with `w[K,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [b, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [kout, kc, kh, kw] = self.value(w).dims4("conv2d")?;
        if kc != c || kh != kw {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        let (oh, ow) = match (
            kernels::out_extent(h, kh, stride, pad),
            kernels::out_extent(wd, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} gives no output on {h}x{wd}"
                )))
            }
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b, kout, &geom);
        let out = Tensor::new(&[b, kout, oh, ow], data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, rg))
    }

    /// Unpadded max pooling with a square window.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("maxpool2d")?;
        let (oh, ow) = match (
            kernels::out_extent(h, k, stride, 0),
            kernels::out_extent(w, k, stride, 0),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool2d: window {k} stride {stride} gives no output on {h}x{w}"
                )))
            }
        };
        let (data, argmax) = kernels::maxpool_forward(self.value(x).data(), b * c, h, w, k, stride, oh, ow);
        let out = Tensor::new(&[b, c, oh, ow], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Batch normalization over `(B,H,W)` per channel.
    ///
    /// In training mode the returned statistics are the batch mean and the
    /// unbiased batch variance; folding them into running statistics is the
    /// caller's job.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.value(x).dims4("batchnorm2d")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batchnorm2d", self.shape(x), self.shape(gamma)));
        }
        let hw = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let (mean, var) = kernels::channel_moments(xs, b, c, hw);
                let m = b * hw;
                let corr = if m > 1 {
                    T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
                } else {
                    T::one()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * corr).collect(),
                };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Dimension(format!(
                        "batchnorm2d: running statistics of length {} for {c} channels",
                        running_mean.len()
                    )));
                }
                (running_mean.to_vec(), running_var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for (p, plane) in xs.chunks_exact(hw).enumerate() {
            let ch = p % c;
            for &v in plane {
                let xh = (v - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// `[B,C,H,W]` → `[B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = T::from_usize(h * w).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let out = Tensor::new(&[b, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Channel concatenation of `[B,C1,H,W]` and `[B,C2,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let la = ca * ha * wa;
        let lb = cb * hb * wb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ba * (la + lb));
        for k in 0..ba {
            data.extend_from_slice(&da[k * la..(k + 1) * la]);
            data.extend_from_slice(&db[k * lb..(k + 1) * lb]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// `[B,n]` → `[B,n,H,W]`, each score copied over a constant plane.
    pub fn expand_planes(&mut self, d: Var, h: usize, w: usize) -> Result<Var> {
        let [b, n] = self.value(d).dims2("expand_planes")?;
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("expand_planes to {h}x{w}")));
        }
        let mut data = Vec::with_capacity(b * n * h * w);
        for &s in self.value(d).data() {
            data.extend(core::iter::repeat_n(s, h * w));
        }
        let out = Tensor::new(&[b, n, h, w], data)?;
        let rg = self.rg(d);
        Ok(self.push(out, Op::ExpandPlanes(d), rg))
    }

    /// Runs the tape backwards from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            None => {
                grads[v.0] = Some(Tensor::new(self.shape(v), data).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let [p, q] = self.value(a).dims2("matmul").unwrap();
                let r = self.value(b).shape()[1];
                if self.rg(a) {
                    let mut da = vec![T::zero(); p * q];
                    gemm(p, r, q, gd, false, self.value(b).data(), true, T::zero(), &mut da);
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); q * r];
                    gemm(q, p, r, self.value(a).data(), true, gd, false, T::zero(), &mut db);
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, gd.to_vec());
                self.acc(grads, b, gd.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, gd.to_vec());
                self.acc(grads, b, gd.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.acc(grads, a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(b) {
                    self.acc(grads, b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, gd.iter().map(|&v| v * s).collect()),
            &Op::AddScalar(a) => self.acc(grads, a, gd.to_vec()),
            &Op::SubScalarVar(a, s) => {
                self.acc(grads, a, gd.to_vec());
                self.acc(grads, s, vec![-g.sum()]);
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                self.acc(
                    grads,
                    a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            &Op::LnClamped(a) => {
                let floor = T::from_f64_lossy(LOG_CLAMP);
                let x = self.value(a).data();
                self.acc(
                    grads,
                    a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > floor { g / v } else { T::zero() })
                        .collect(),
                );
            }
            &Op::SumAll(a) => {
                let gs = gd[0];
                self.acc(grads, a, vec![gs; self.value(a).len()]);
            }
            &Op::SumRows(a) => {
                let [r, c] = self.value(a).dims2("sum_rows").unwrap();
                let mut da = Vec::with_capacity(r * c);
                for _ in 0..r {
                    da.extend_from_slice(&gd[..c]);
                }
                self.acc(grads, a, da);
            }
            &Op::Transpose(a) => {
                self.acc(grads, a, g.transpose().unwrap().into_data());
            }
            &Op::Column(a, j) => {
                let [r, c] = self.value(a).dims2("column").unwrap();
                let mut da = vec![T::zero(); r * c];
                for k in 0..r {
                    da[k * c + j] = gd[k];
                }
                self.acc(grads, a, da);
            }
            &Op::Reshape(a) => self.acc(grads, a, gd.to_vec()),
            &Op::AddRowBias(a, bias) => {
                self.acc(grads, a, gd.to_vec());
                if self.rg(bias) {
                    let c = self.value(bias).len();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, bias, db);
                }
            }
            &Op::AddChannelBias(a, bias) => {
                self.acc(grads, a, gd.to_vec());
                if self.rg(bias) {
                    let [_, c, h, w] = self.value(a).dims4("add_channel_bias").unwrap();
                    let mut db = vec![T::zero(); c];
                    for (p, plane) in gd.chunks_exact(h * w).enumerate() {
                        db[p % c] += plane.iter().copied().sum::<T>();
                    }
                    self.acc(grads, bias, db);
                }
            }
            &Op::SoftmaxRows(a) => {
                let n = *out.shape().last().unwrap();
                let y = out.data();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(n).zip(gd.chunks_exact(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    da.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.acc(grads, a, da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.value(*logits).shape()[1];
                let scale = gd[0] / T::from_usize(labels.len()).unwrap();
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (k, &l) in labels.iter().enumerate() {
                    dz[k * n + l] -= scale;
                }
                self.acc(grads, *logits, dz);
            }
            &Op::Conv2d { x, w, ref geom } => {
                let b = self.value(x).shape()[0];
                let kout = self.value(w).shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    gd,
                    b,
                    kout,
                    geom,
                    self.rg(x),
                    self.rg(w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    dx[idx] += gv;
                }
                self.acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = self.value(*x).dims4("batchnorm2d").unwrap();
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (p, (gp, xp)) in gd.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                    let ch = p % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.rg(*x) {
                    let m = T::from_usize(b * hw).unwrap();
                    let mut dx = Vec::with_capacity(gd.len());
                    for (p, (gp, xp)) in gd.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                        let ch = p % c;
                        let k = gm[ch] * inv_std[ch];
                        if *train {
                            for (&gv, &xv) in gp.iter().zip(xp) {
                                dx.push(k * (gv - sum_g[ch] / m - xv * sum_gx[ch] / m));
                            }
                        } else {
                            dx.extend(gp.iter().map(|&gv| k * gv));
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, sum_gx);
                self.acc(grads, *beta, sum_g);
            }
            &Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(x).dims4("global_avg_pool").unwrap();
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(self.value(x).len());
                for &gv in gd {
                    dx.extend(core::iter::repeat_n(gv * inv, h * w));
                }
                self.acc(grads, x, dx);
            }
            &Op::ConcatChannels(a, b) => {
                let ba = self.value(a).shape()[0];
                let la = self.value(a).len() / ba;
                let lb = self.value(b).len() / ba;
                if self.rg(a) {
                    let mut da = Vec::with_capacity(ba * la);
                    for k in 0..ba {
                        da.extend_from_slice(&gd[k * (la + lb)..k * (la + lb) + la]);
                    }
                    self.acc(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = Vec::with_capacity(ba * lb);
                    for k in 0..ba {
                        db.extend_from_slice(&gd[k * (la + lb) + la..(k + 1) * (la + lb)]);
                    }
                    self.acc(grads, b, db);
                }
            }
            &Op::ExpandPlanes(d) => {
                let [_, _, h, w] = out.dims4("expand_planes").unwrap();
                let dd = gd.chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>()).collect();
                self.acc(grads, d, dd);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`; zeros of matching shape if `v` did not contribute.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, zeros if absent.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[2, 2]));
        let unused = g.param(Tensor::ones(&[3]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a), Tensor::ones(&[2, 2]));
        assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
        assert!(grads.try_get(unused).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        // d/dx sum(x*x + x) = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let b = g.input(Tensor::from_f64(&[2], &[core::f64::consts::LN_2, 0.0]).unwrap());
        let c = g.input(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap());
        let (sa, sb, sc) = (g.softmax(a).unwrap(), g.softmax(b).unwrap(), g.softmax(c).unwrap());
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        assert!((g.value(sb).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(sb).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(g.value(sc).is_finite());
        assert!((g.value(sc).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(sc).data()[1] < 1e-300);
        assert!(g.first_non_finite().is_none());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[1, 2, 4, 5], |i| i as f64 * 0.25 - 3.0));
        let id = g.input(Tensor::from_fn(&[2, 2, 1, 1], |i| if i == 0 || i == 3 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, id, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let c = g.input(Tensor::full(&[1, 1, 5, 5], 1.5));
        let ones = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(c, ones, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 13.5).abs() < 1e-12));

        let big = g.input(Tensor::ones(&[1, 1, 5, 5, ]));
        let k7 = g.input(Tensor::ones(&[1, 1, 7, 7]));
        assert!(matches!(g.conv2d(big, k7, 1, 0), Err(Error::Dimension(_))));
        assert!(g.conv2d(big, k7, 1, 1).is_ok());
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|v| v.index())),
        }
        let z = g.input(Tensor::zeros(&[2, 3]));
        let any = g.input(Tensor::from_fn(&[3, 4], |i| i as f64));
        let y = g.matmul(z, any).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2, 1, 2, 2], 3.0));
        let gamma = g.input(Tensor::full(&[1], 2.0));
        let beta = g.input(Tensor::full(&[1], 0.5));
        let (y, stats) = g
            .batchnorm2d(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    running_mean: &[1.0],
                    running_var: &[4.0 - BN_EPS],
                },
            )
            .unwrap();
        assert!(stats.is_none());
        // 2 * (3 - 1) / 2 + 0.5
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));

        let (y, stats) = g.batchnorm2d(x, gamma, beta, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, [3.0]);
        assert_eq!(stats.var_unbiased, [0.0]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
