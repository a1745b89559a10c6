//! Parameterised building blocks shared by the three networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, ParamId, ParamSet, Var};
use crate::tensor::{Float, Tensor};

/// Registers named parameters under a dotted prefix.
pub(crate) struct Builder<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { params, rng, prefix: prefix.to_string() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder { params: self.params, rng: self.rng, prefix: format!("{}.{name}", self.prefix) }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        let full = self.full_name(name);
        self.params.add(full, Tensor::new(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.params.add(full, Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let mut s = b.scope(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self { w: s.uniform("weight", vec![cout, cin, k, k], bound), b: s.uniform("bias", vec![cout], bound), spec }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, &w, Some(&b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.scope(name);
        let bound = 1.0 / (din as f64).sqrt();
        Self { w: s.uniform("weight", vec![dout, din], bound), b: s.uniform("bias", vec![dout], bound) }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, &w, Some(&b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-6;

impl GroupNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize, groups: usize) -> Self {
        let mut s = b.scope(name);
        Self { gamma: s.constant("weight", vec![channels], 1.0), beta: s.constant("bias", vec![channels], 0.0), groups }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.group_norm(x, &gamma, &beta, self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Prelu {
    alpha: ParamId,
}

impl Prelu {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str) -> Self {
        Self { alpha: b.scope(name).constant("weight", vec![1], 0.25) }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let a = g.param(ps, self.alpha);
        g.prelu(x, &a)
    }
}
