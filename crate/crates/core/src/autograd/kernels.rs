//! Forward and backward kernels over raw NCHW buffers.

use crate::tensor::{matmul, Float};

/// Stride, zero-padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn same(padding: usize, dilation: usize) -> Self {
        Self { stride: 1, padding, dilation }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        assert!(padded >= span, "kernel span {span} exceeds padded input {padded}");
        (padded - span) / self.stride + 1
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn src(&self, o: usize, kk: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + kk * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky).filter(|&iy| iy < g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let srow = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx).filter(|&ix| ix < g.w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky).filter(|&iy| iy < g.h) else { continue };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx).filter(|&ix| ix < g.w) {
                            plane[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, ho, wo)` for input `[n, cin, h, w]` and weight `[cout, cin, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Float>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[T],
    cout: usize,
    k: usize,
    bias: Option<&[T]>,
    spec: ConvSpec,
) -> (Vec<T>, usize, usize) {
    let ho = spec.output_size(h, k);
    let wo = spec.output_size(w, k);
    let g = ConvGeom { cin, h, w, k, ho, wo, spec };
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * cout * cols];
    let mut col = if spec.is_pointwise(k) { Vec::new() } else { vec![T::zero(); rows * cols] };
    for b in 0..n {
        let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
        let ob = &mut out[b * cout * cols..(b + 1) * cout * cols];
        let src: &[T] = if spec.is_pointwise(k) {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        matmul(cout, rows, cols, weight, false, src, false, ob, false);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(cols).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    (out, ho, wo)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[T],
    cout: usize,
    k: usize,
    spec: ConvSpec,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let ho = spec.output_size(h, k);
    let wo = spec.output_size(w, k);
    let g = ConvGeom { cin, h, w, k, ho, wo, spec };
    let (rows, cols) = (g.rows(), g.cols());
    let pointwise = spec.is_pointwise(k);
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut db = vec![T::zero(); cout];
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if pointwise || !need_input { 0 } else { rows * cols }];
    for b in 0..n {
        let gb = &grad_out[b * cout * cols..(b + 1) * cout * cols];
        for (co, chunk) in gb.chunks(cols).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let xb = &x[b * cin * h * w..(b + 1) * cin * h * w];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, &g, &mut col);
                &col
            };
            matmul(cout, cols, rows, gb, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
            if pointwise {
                matmul(rows, cout, cols, weight, true, gb, false, dxb, false);
            } else {
                matmul(rows, cout, cols, weight, true, gb, false, &mut dcol, false);
                col2im(&dcol, &g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Group normalisation; returns `(y, mean, rstd)` with one statistic per `(n, group)`.
pub fn group_norm_forward<T: Float>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let m = cpg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let start = (b * c + gi * cpg) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let (mean_t, rstd_t) = (T::lit(mean), T::lit(rstd));
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let (gm, bt) = (gamma[ch], beta[ch]);
                let off = start + ci * hw;
                for i in off..off + hw {
                    y[i] = (x[i] - mean_t) * rstd_t * gm + bt;
                }
            }
            means.push(mean_t);
            rstds.push(rstd_t);
        }
    }
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Float>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let hw = h * w;
    let m = T::lit((cpg * hw) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for gi in 0..groups {
            let s = b * groups + gi;
            let (mu, rs) = (mean[s], rstd[s]);
            let start = (b * c + gi * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * rs;
                    dg += gy[i] * xhat;
                    dbt += gy[i];
                    let dxhat = gy[i] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * rs;
                    let dxhat = gy[i] * gamma[ch];
                    dx[i] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax over the trailing axis of length `len`.
pub fn softmax_rows<T: Float>(x: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

pub fn softmax_rows_backward<T: Float>(out: &[T], gy: &[T], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); out.len()];
    for ((o, g), d) in out.chunks(len).zip(gy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot: T = o.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((dv, &ov), &gv) in d.iter_mut().zip(o).zip(g) {
            *dv = ov * (gv - dot);
        }
    }
    dx
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
