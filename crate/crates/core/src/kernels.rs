//! Raw loops behind the graph operations. Everything works on flat row-major
//! slices; shape checking happens in `graph`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::gemm;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a strided window, `None` when it would be non-positive.
pub(crate) fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || k == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// One sample `[C,H,W]` into columns `[C·k·k, OH·OW]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation, `x: [B,C,H,W]`, `w: [K,C,k,k]` → `[B,K,OH,OW]`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], batch: usize, kout: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = kout * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(
            kout,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            &cols,
            false,
            T::zero(),
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    kout: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.c * g.h * g.w;
    let out_len = kout * g.col_cols();
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dcols = vec![T::zero(); rows * ncol];
    for b in 0..batch {
        let dout_b = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            // dW[K, rows] += dOut[K, ncol] · colsᵀ
            gemm(kout, ncol, rows, dout_b, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, ncol] = Wᵀ · dOut
            gemm(rows, kout, ncol, w, true, dout_b, false, T::zero(), &mut dcols);
            col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Max pooling with no padding. Returns values and the flat argmax of each window.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        // first maximum wins on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel batch statistics over `(B,H,W)`: biased mean and variance.
pub(crate) fn channel_moments<T: Real>(x: &[T], batch: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(batch * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..batch {
            let start = (b * c + ch) * hw;
            s += x[start..start + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            let start = (b * c + ch) * hw;
            for &e in &x[start..start + hw] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Row-wise softmax of a `[rows, n]` matrix with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    out
}
