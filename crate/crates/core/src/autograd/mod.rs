//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every operation computes its value eagerly. When the graph records
//! gradients and at least one input is tracked, the operation is appended
//! to the tape together with whatever it needs for its backward rule.
//! Untracked values are dropped as soon as the caller releases them, so
//! inference graphs hold only live activations.

mod kernels;

use std::sync::Arc;

pub use kernels::{sigmoid, softplus, ConvSpec};

use crate::tensor::{matmul, Float, Tensor};

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value: Arc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Mutable access; clones the buffer if a graph still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.get(id).shape(), value.shape(), "shape change for {}", self.entries[id.0].name);
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar parameter count restricted to names with the given prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: Arc::new(e.value.cast()) })
                .collect(),
        }
    }
}

/// A value flowing through a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Float> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self { node: None, value: Arc::new(value) }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

type Saved<T> = (Option<usize>, Arc<Tensor<T>>);

enum Op<T> {
    Param(ParamId),
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul(Saved<T>, Saved<T>),
    Scale(Option<usize>, T),
    ScaleBatch(Option<usize>, Vec<T>),
    AddScalar(Option<usize>),
    Silu(Saved<T>),
    Sigmoid(Option<usize>, Arc<Tensor<T>>),
    Softplus(Saved<T>),
    Prelu { x: Saved<T>, alpha: Saved<T> },
    Conv2d { x: Saved<T>, w: Saved<T>, b: Option<usize>, spec: ConvSpec },
    Linear { x: Saved<T>, w: Saved<T>, b: Option<usize> },
    GroupNorm { x: Saved<T>, gamma: Saved<T>, beta: Option<usize>, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    ConcatChannels { a: Option<usize>, b: Option<usize>, ca: usize, cb: usize, n: usize, hw: usize },
    Upsample2x { x: Option<usize>, dims: (usize, usize, usize, usize) },
    GlobalAvgPool { x: Option<usize>, dims: (usize, usize, usize, usize) },
    BroadcastSpatial { x: Option<usize>, hw: usize },
    ExpandChannels { x: Option<usize>, c: usize },
    AddChannelBias { x: Option<usize>, v: Option<usize>, hw: usize },
    Reshape { x: Option<usize>, shape: Vec<usize> },
    BatchMatMul { a: Saved<T>, b: Saved<T>, ta: bool, tb: bool, dims: (usize, usize, usize, usize) },
    Softmax(Option<usize>, Arc<Tensor<T>>),
    Mse(Saved<T>, Saved<T>),
}

/// Accumulated parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        if self.by_param.len() <= id.0 {
            self.by_param.resize_with(id.0 + 1, || None);
        }
        match &mut self.by_param[id.0] {
            Some(g) => g.add_assign(&grad),
            slot => *slot = Some(grad),
        }
    }

    /// Drops the gradient of `id`, so an optimizer leaves that parameter alone.
    pub fn remove(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.by_param.get_mut(id.0).and_then(Option::take)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}

/// The tape. Create one per forward pass.
pub struct Graph<T> {
    ops: Vec<Op<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn id<T>(v: &Var<T>) -> Option<usize> {
    v.node
}

fn saved<T>(v: &Var<T>) -> Saved<T> {
    (v.node, v.value.clone())
}

impl<T: Float> Graph<T> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self { ops: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records; parameters enter as constants.
    pub fn inference() -> Self {
        Self { ops: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, tracked: bool, op: impl FnOnce() -> Op<T>, value: Arc<Tensor<T>>) -> Var<T> {
        if self.grad_enabled && tracked {
            self.ops.push(op());
            Var { node: Some(self.ops.len() - 1), value }
        } else {
            Var { node: None, value }
        }
    }

    pub fn param(&mut self, params: &ParamSet<T>, pid: ParamId) -> Var<T> {
        let value = params.entries[pid.0].value.clone();
        self.push(true, || Op::Param(pid), value)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let v = a.value.zip_map(&b.value, |x, y| x + y);
        self.push(a.is_tracked() || b.is_tracked(), || Op::Add(id(a), id(b)), Arc::new(v))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let v = a.value.zip_map(&b.value, |x, y| x - y);
        self.push(a.is_tracked() || b.is_tracked(), || Op::Sub(id(a), id(b)), Arc::new(v))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let v = a.value.zip_map(&b.value, |x, y| x * y);
        self.push(a.is_tracked() || b.is_tracked(), || Op::Mul(saved(a), saved(b)), Arc::new(v))
    }

    pub fn scale(&mut self, a: &Var<T>, s: T) -> Var<T> {
        let v = a.value.scale(s);
        self.push(a.is_tracked(), || Op::Scale(id(a), s), Arc::new(v))
    }

    /// Multiplies batch item `i` (leading axis) by `coeffs[i]`.
    pub fn scale_batch(&mut self, a: &Var<T>, coeffs: &[T]) -> Var<T> {
        let n = a.shape()[0];
        assert_eq!(coeffs.len(), n, "one coefficient per batch item");
        let per = a.value.numel() / n;
        let mut v = a.to_tensor();
        for (chunk, &c) in v.data_mut().chunks_mut(per).zip(coeffs) {
            chunk.iter_mut().for_each(|x| *x *= c);
        }
        self.push(a.is_tracked(), || Op::ScaleBatch(id(a), coeffs.to_vec()), Arc::new(v))
    }

    pub fn add_scalar(&mut self, a: &Var<T>, s: T) -> Var<T> {
        let v = a.value.map(|x| x + s);
        self.push(a.is_tracked(), || Op::AddScalar(id(a)), Arc::new(v))
    }

    pub fn silu(&mut self, a: &Var<T>) -> Var<T> {
        let v = a.value.map(|x| x * sigmoid(x));
        self.push(a.is_tracked(), || Op::Silu(saved(a)), Arc::new(v))
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Var<T> {
        let v = Arc::new(a.value.map(sigmoid));
        let out = v.clone();
        self.push(a.is_tracked(), || Op::Sigmoid(id(a), out), v)
    }

    pub fn softplus(&mut self, a: &Var<T>) -> Var<T> {
        let v = a.value.map(softplus);
        self.push(a.is_tracked(), || Op::Softplus(saved(a)), Arc::new(v))
    }

    /// Parametric ReLU with one slope (`alpha` of shape `[1]`) or one per channel.
    pub fn prelu(&mut self, x: &Var<T>, alpha: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let na = alpha.value.numel();
        assert!(na == 1 || na == c, "prelu slope count {na} for {c} channels");
        let a = alpha.value.data();
        let mut v = x.to_tensor();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            if *val <= T::zero() {
                let ch = if na == 1 { 0 } else { (i / (h * w)) % c };
                *val *= a[ch];
            }
        }
        let _ = n;
        self.push(x.is_tracked() || alpha.is_tracked(), || Op::Prelu { x: saved(x), alpha: saved(alpha) }, Arc::new(v))
    }

    /// Convolution of `x: [n, cin, h, w]` with `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: ConvSpec) -> Var<T> {
        let dims = x.value.dims4();
        let (cout, cin, k, k2) = w.value.dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, dims.1, "conv expects {cin} input channels, got {}", dims.1);
        let (out, ho, wo) =
            kernels::conv2d_forward(x.value.data(), dims, w.value.data(), cout, k, b.map(|b| b.value.data()), spec);
        let v = Tensor::new(vec![dims.0, cout, ho, wo], out);
        let tracked = x.is_tracked() || w.is_tracked() || b.is_some_and(|b| b.is_tracked());
        self.push(tracked, || Op::Conv2d { x: saved(x), w: saved(w), b: b.and_then(id), spec }, Arc::new(v))
    }

    /// Dense layer: `x [n, in]`, `w [out, in]`, optional `b [out]`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let (dout, win) = (w.shape()[0], w.shape()[1]);
        assert_eq!(din, win, "linear expects {win} inputs, got {din}");
        let mut out = vec![T::zero(); n * dout];
        matmul(n, din, dout, x.value.data(), false, w.value.data(), true, &mut out, false);
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(b.value.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let tracked = x.is_tracked() || w.is_tracked() || b.is_some_and(|b| b.is_tracked());
        self.push(
            tracked,
            || Op::Linear { x: saved(x), w: saved(w), b: b.and_then(id) },
            Arc::new(Tensor::new(vec![n, dout], out)),
        )
    }

    pub fn group_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, groups: usize, eps: f64) -> Var<T> {
        let dims = x.value.dims4();
        assert_eq!(dims.1 % groups, 0, "{} channels not divisible into {groups} groups", dims.1);
        let (y, mean, rstd) =
            kernels::group_norm_forward(x.value.data(), dims, groups, gamma.value.data(), beta.value.data(), eps);
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        self.push(
            tracked,
            || Op::GroupNorm { x: saved(x), gamma: saved(gamma), beta: id(beta), groups, mean, rstd },
            Arc::new(Tensor::new(x.shape().to_vec(), y)),
        )
    }

    pub fn concat_channels(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let (n, ca, h, w) = a.value.dims4();
        let (nb, cb, hb, wb) = b.value.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(a.value.item(i));
            out.extend_from_slice(b.value.item(i));
        }
        let v = Tensor::new(vec![n, ca + cb, h, w], out);
        self.push(
            a.is_tracked() || b.is_tracked(),
            || Op::ConcatChannels { a: id(a), b: id(b), ca, cb, n, hw },
            Arc::new(v),
        )
    }

    pub fn upsample_nearest2x(&mut self, x: &Var<T>) -> Var<T> {
        let dims @ (n, c, h, w) = x.value.dims4();
        let src = x.value.data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    d[y * 2 * w + xo] = s[(y / 2) * w + xo / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, 2 * h, 2 * w], out);
        self.push(x.is_tracked(), || Op::Upsample2x { x: id(x), dims }, Arc::new(v))
    }

    /// Mean over the spatial axes, keeping them as size 1.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Var<T> {
        let dims @ (n, c, h, w) = x.value.dims4();
        let inv = T::one() / T::lit((h * w) as f64);
        let out: Vec<T> = x.value.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor::new(vec![n, c, 1, 1], out);
        self.push(x.is_tracked(), || Op::GlobalAvgPool { x: id(x), dims }, Arc::new(v))
    }

    /// `[n, c, 1, 1]` → `[n, c, h, w]`.
    pub fn broadcast_spatial(&mut self, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        let (n, c, one_h, one_w) = x.value.dims4();
        assert_eq!((one_h, one_w), (1, 1), "broadcast_spatial expects a 1x1 map");
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in x.value.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let v = Tensor::new(vec![n, c, h, w], out);
        self.push(x.is_tracked(), || Op::BroadcastSpatial { x: id(x), hw: h * w }, Arc::new(v))
    }

    /// `[n, 1, h, w]` → `[n, c, h, w]`; identity when already `c` channels.
    pub fn expand_channels(&mut self, x: &Var<T>, c: usize) -> Var<T> {
        let (n, c0, h, w) = x.value.dims4();
        if c0 == c {
            return x.clone();
        }
        assert_eq!(c0, 1, "expand_channels expects a single channel");
        let mut out = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for _ in 0..c {
                out.extend_from_slice(x.value.item(i));
            }
        }
        let v = Tensor::new(vec![n, c, h, w], out);
        self.push(x.is_tracked(), || Op::ExpandChannels { x: id(x), c }, Arc::new(v))
    }

    /// Adds a per-item channel vector `v: [n, c]` to `x: [n, c, h, w]`.
    pub fn add_channel_bias(&mut self, x: &Var<T>, v: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        assert_eq!(v.shape(), [n, c], "channel bias shape");
        let mut out = x.to_tensor();
        let hw = h * w;
        for (p, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = v.value.data()[p];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        self.push(x.is_tracked() || v.is_tracked(), || Op::AddChannelBias { x: id(x), v: id(v), hw }, Arc::new(out))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let old = x.shape().to_vec();
        let v = x.to_tensor().reshape(shape.to_vec());
        self.push(x.is_tracked(), || Op::Reshape { x: id(x), shape: old }, Arc::new(v))
    }

    /// Batched `op(a) · op(b)` over rank-3 tensors `[batch, rows, cols]`.
    pub fn batch_matmul(&mut self, a: &Var<T>, ta: bool, b: &Var<T>, tb: bool) -> Var<T> {
        let (ab, ar, ac) = dims3(a.shape());
        let (bb, br, bc) = dims3(b.shape());
        assert_eq!(ab, bb, "batch mismatch");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "inner dimension mismatch");
        let mut out = vec![T::zero(); ab * m * n];
        for i in 0..ab {
            matmul(m, k, n, a.value.item(i), ta, b.value.item(i), tb, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let v = Tensor::new(vec![ab, m, n], out);
        self.push(
            a.is_tracked() || b.is_tracked(),
            || Op::BatchMatMul { a: saved(a), b: saved(b), ta, tb, dims: (ab, m, k, n) },
            Arc::new(v),
        )
    }

    pub fn softmax_last(&mut self, x: &Var<T>) -> Var<T> {
        let len = *x.shape().last().expect("non-scalar");
        let v = Arc::new(Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.value.data(), len)));
        let out = v.clone();
        self.push(x.is_tracked(), || Op::Softmax(id(x), out), v)
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
        let n = T::lit(a.value.numel() as f64);
        let total: T = a.value.data().iter().zip(b.value.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(a.is_tracked() || b.is_tracked(), || Op::Mse(saved(a), saved(b)), Arc::new(Tensor::scalar(total / n)))
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: &Var<T>) -> Gradients<T> {
        let mut params = Gradients::default();
        let Some(root) = output.node else { return params };
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(output.shape().to_vec(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(&self.ops[i], g, &mut grads, &mut params);
        }
        params
    }

    fn backward_op(&self, op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut Gradients<T>) {
        let mut acc = |slot: Option<usize>, t: Tensor<T>| {
            if let Some(s) = slot {
                match &mut grads[s] {
                    Some(existing) => existing.add_assign(&t),
                    empty => *empty = Some(t),
                }
            }
        };
        match op {
            Op::Param(pid) => params.accumulate(*pid, g),
            Op::Add(a, b) => {
                if b.is_some() {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if b.is_some() {
                    acc(*b, g.map(|v| -v));
                }
                acc(*a, g);
            }
            Op::Mul((a, av), (b, bv)) => {
                if a.is_some() {
                    acc(*a, g.zip_map(bv, |x, y| x * y));
                }
                if b.is_some() {
                    acc(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::ScaleBatch(a, coeffs) => {
                let per = g.numel() / coeffs.len();
                let mut out = g;
                for (chunk, &c) in out.data_mut().chunks_mut(per).zip(coeffs) {
                    chunk.iter_mut().for_each(|x| *x *= c);
                }
                acc(*a, out);
            }
            Op::AddScalar(a) => acc(*a, g),
            Op::Silu((a, av)) => acc(
                *a,
                g.zip_map(av, |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                }),
            ),
            Op::Sigmoid(a, out) => acc(*a, g.zip_map(out, |gv, y| gv * y * (T::one() - y))),
            Op::Softplus((a, av)) => acc(*a, g.zip_map(av, |gv, x| gv * sigmoid(x))),
            Op::Prelu { x: (xi, xv), alpha: (ai, avv) } => {
                let (_, c, h, w) = xv.dims4();
                let na = avv.numel();
                let alpha = avv.data();
                let mut dx = g.clone();
                let mut da = vec![T::zero(); na];
                for (i, (d, &x)) in dx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                    if x <= T::zero() {
                        let ch = if na == 1 { 0 } else { (i / (h * w)) % c };
                        da[ch] += *d * x;
                        *d *= alpha[ch];
                    }
                }
                if ai.is_some() {
                    acc(*ai, Tensor::new(avv.shape().to_vec(), da));
                }
                acc(*xi, dx);
            }
            Op::Conv2d { x: (xi, xv), w: (wi, wv), b, spec } => {
                let (cout, _, k, _) = wv.dims4();
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    xv.dims4(),
                    wv.data(),
                    cout,
                    k,
                    *spec,
                    g.data(),
                    xi.is_some(),
                    wi.is_some(),
                );
                if let Some(dx) = dx {
                    acc(*xi, Tensor::new(xv.shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    acc(*wi, Tensor::new(wv.shape().to_vec(), dw));
                }
                acc(*b, Tensor::new(vec![cout], db));
            }
            Op::Linear { x: (xi, xv), w: (wi, wv), b } => {
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if xi.is_some() {
                    let mut dx = vec![T::zero(); n * din];
                    matmul(n, dout, din, g.data(), false, wv.data(), false, &mut dx, false);
                    acc(*xi, Tensor::new(vec![n, din], dx));
                }
                if wi.is_some() {
                    let mut dw = vec![T::zero(); dout * din];
                    matmul(dout, n, din, g.data(), true, xv.data(), false, &mut dw, false);
                    acc(*wi, Tensor::new(vec![dout, din], dw));
                }
                if b.is_some() {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    acc(*b, Tensor::new(vec![dout], db));
                }
            }
            Op::GroupNorm { x: (xi, xv), gamma: (gi, gv), beta, groups, mean, rstd } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(xv.data(), xv.dims4(), *groups, gv.data(), mean, rstd, g.data());
                let c = gv.numel();
                acc(*xi, Tensor::new(xv.shape().to_vec(), dx));
                acc(*gi, Tensor::new(vec![c], dg));
                acc(*beta, Tensor::new(vec![c], db));
            }
            Op::ConcatChannels { a, b, ca, cb, n, hw } => {
                let (sa, sb) = (ca * hw, cb * hw);
                let mut ga = Vec::with_capacity(n * sa);
                let mut gb = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    ga.extend_from_slice(&chunk[..sa]);
                    gb.extend_from_slice(&chunk[sa..]);
                }
                let h_w = g.shape()[2..].to_vec();
                let shape = |c: usize| [vec![*n, c], h_w.clone()].concat();
                acc(*a, Tensor::new(shape(*ca), ga));
                acc(*b, Tensor::new(shape(*cb), gb));
            }
            Op::Upsample2x { x, dims: (n, c, h, w) } => {
                let mut dx = vec![T::zero(); n * c * h * w];
                let src = g.data();
                for p in 0..n * c {
                    let s = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            d[(y / 2) * w + xo / 2] += s[y * 2 * w + xo];
                        }
                    }
                }
                acc(*x, Tensor::new(vec![*n, *c, *h, *w], dx));
            }
            Op::GlobalAvgPool { x, dims: (n, c, h, w) } => {
                let inv = T::one() / T::lit((h * w) as f64);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                acc(*x, Tensor::new(vec![*n, *c, *h, *w], dx));
            }
            Op::BroadcastSpatial { x, hw } => {
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let dx: Vec<T> = g.data().chunks(*hw).map(|p| p.iter().copied().sum()).collect();
                acc(*x, Tensor::new(vec![n, c, 1, 1], dx));
            }
            Op::ExpandChannels { x, c } => {
                let (n, _, h, w) = g.dims4();
                let hw = h * w;
                let mut dx = vec![T::zero(); n * hw];
                for (p, chunk) in g.data().chunks(hw).enumerate() {
                    let dst = &mut dx[(p / c) * hw..(p / c + 1) * hw];
                    dst.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
                acc(*x, Tensor::new(vec![n, 1, h, w], dx));
            }
            Op::AddChannelBias { x, v, hw } => {
                if v.is_some() {
                    let (n, c) = (g.shape()[0], g.shape()[1]);
                    let dv: Vec<T> = g.data().chunks(*hw).map(|p| p.iter().copied().sum()).collect();
                    acc(*v, Tensor::new(vec![n, c], dv));
                }
                acc(*x, g);
            }
            Op::Reshape { x, shape } => acc(*x, g.reshape(shape.clone())),
            Op::BatchMatMul { a: (ai, av), b: (bi, bv), ta, tb, dims: (batch, m, k, n) } => {
                let (m, k, n) = (*m, *k, *n);
                if ai.is_some() {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let bi_ = bv.item(i);
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        // dA(logical m×k) = dC · op(B)^T; stored transposed when `ta`.
                        match *ta {
                            false => matmul(m, n, k, gi, false, bi_, !*tb, out, false),
                            true => matmul(k, n, m, bi_, *tb, gi, true, out, false),
                        }
                    }
                    acc(*ai, Tensor::new(av.shape().to_vec(), da));
                }
                if bi.is_some() {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..*batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai_ = av.item(i);
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        // dB(logical k×n) = op(A)^T · dC; stored transposed when `tb`.
                        match *tb {
                            false => matmul(k, m, n, ai_, !*ta, gi, false, out, false),
                            true => matmul(n, m, k, gi, true, ai_, *ta, out, false),
                        }
                    }
                    acc(*bi, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::Softmax(x, out) => {
                let len = *out.shape().last().unwrap();
                let dx = kernels::softmax_rows_backward(out.data(), g.data(), len);
                acc(*x, Tensor::new(out.shape().to_vec(), dx));
            }
            Op::Mse((ai, av), (bi, bv)) => {
                let scale = T::lit(2.0) * g.data()[0] / T::lit(av.numel() as f64);
                let diff = av.zip_map(bv, |x, y| (x - y) * scale);
                if bi.is_some() {
                    acc(*bi, diff.map(|v| -v));
                }
                acc(*ai, diff);
            }
        }
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [a, b, c] => (a, b, c),
        _ => panic!("expected rank-3 tensor, got {shape:?}"),
    }
}

#[cfg(test)]
mod tests;
