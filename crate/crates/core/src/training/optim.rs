use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

fn zeros_like<T: Float>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for e in params.entries() {
        out.add(e.name.clone(), Tensor::zeros(e.value.shape().to_vec()));
    }
    out
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Self { config, step: 0, m: zeros_like(params), v: zeros_like(params) }
    }

    pub fn from_state(config: AdamConfig, step: u64, m: ParamSet<T>, v: ParamSet<T>) -> Self {
        Self { config, step, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&ParamSet<T>, &ParamSet<T>) {
        (&self.m, &self.v)
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::lit(c.learning_rate / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (eps, wd) = (T::lit(c.eps), T::lit(c.weight_decay));
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + wd * *p;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·weights` for every parameter.
pub fn ema_update<T: Float>(shadow: &mut ParamSet<T>, weights: &ParamSet<T>, decay: f64) {
    let (d, rest) = (T::lit(decay), T::lit(1.0 - decay));
    for id in weights.ids() {
        let w = weights.get(id);
        let s = shadow.get_mut(id);
        s.data_mut().iter_mut().zip(w.data()).for_each(|(s, &w)| *s = d * *s + rest * w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, ParamSet};

    fn one_param(v: f64) -> (ParamSet<f64>, crate::autograd::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![v]));
        (ps, id)
    }

    /// Gradient of `0.5·k·w²` is `k·w`.
    fn quad_grads(ps: &ParamSet<f64>, id: crate::autograd::ParamId, k: f64) -> crate::autograd::Gradients<f64> {
        let mut g = Graph::new();
        let w = g.param(ps, id);
        let sq = g.mul(&w, &w);
        let y = g.scale(&sq, 0.5 * k);
        g.backward(&y)
    }

    #[test]
    fn scalar_adam_matches_hand_computation() {
        let (mut ps, id) = one_param(1.5);
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &ps);
        // Two steps by hand with gradient 2·w.
        let (mut w, mut m, mut v) = (1.5f64, 0.0, 0.0);
        for t in 1..=2 {
            let grads = quad_grads(&ps, id, 2.0);
            opt.update(&mut ps, &grads);
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((ps.get(id).data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (mut ps, id) = one_param(0.7);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }, &ps);
        let grads = quad_grads(&ps, id, 3.0);
        opt.update(&mut ps, &grads);
        assert_eq!(ps.get(id).data(), &[0.7]);
    }

    #[test]
    fn ema_recurrence() {
        let (weights, id) = one_param(1.0);
        let (mut shadow, _) = one_param(0.0);
        for _ in 0..100 {
            ema_update(&mut shadow, &weights, 0.999);
        }
        let gap = 1.0 - shadow.get(id).data()[0];
        assert!((gap - 0.999f64.powi(100)).abs() < 1e-12);

        let (mut s, _) = one_param(0.3);
        ema_update(&mut s, &weights, 0.0);
        assert_eq!(s.get(id).data(), &[1.0]);
        let (mut s, _) = one_param(0.3);
        ema_update(&mut s, &weights, 1.0);
        assert_eq!(s.get(id).data(), &[0.3]);
    }
}
