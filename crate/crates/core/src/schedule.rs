//! Noise schedule and the closed-form diffusion identities built on it.
//!
//! Steps are 1-based: `t ∈ 1..=T`. Index 0 is the clean level with
//! `ᾱ_0 = 1`, which makes the `t = 1` posterior and the `t_prev = 0`
//! implicit step well defined. All coefficients are computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Linear
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, kind: ScheduleKind::Linear, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { steps, beta_start, beta_end, .. } = config;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
        }
        let mut beta = vec![0.0; steps + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = match config.kind {
                ScheduleKind::Linear if steps == 1 => beta_start,
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64,
            };
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut posterior_var = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) * (1.0 - alpha[t]) / (1.0 - alpha_bar[t]);
        }
        Ok(Self { config, beta, alpha, alpha_bar, posterior_var })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `σ_t² = (1-ᾱ_{t-1})(1-α_t)/(1-ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParameter(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// A diffused tensor together with its noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusedState<T> {
    pub value: Tensor<T>,
    pub t: usize,
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·z`.
pub fn q_sample<T: Float>(x0: &Tensor<T>, t: usize, z: &Tensor<T>, s: &NoiseSchedule) -> Result<DiffusedState<T>> {
    s.check_step(t)?;
    same_shape(x0, z, "q_sample noise")?;
    let (a, b) = s.signal_noise(t);
    let (a, b) = (T::lit(a), T::lit(b));
    Ok(DiffusedState { value: x0.zip_map(z, |x, n| a * x + b * n), t })
}

/// Per-item `q_sample` over the leading (batch) axis.
pub fn q_sample_items<T: Float>(x0: &Tensor<T>, ts: &[usize], z: &Tensor<T>, s: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape(x0, z, "q_sample noise")?;
    if ts.len() != x0.shape()[0] {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {}", ts.len(), x0.shape()[0])));
    }
    let per = x0.numel() / ts.len();
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        s.check_step(t)?;
        let (a, b) = s.signal_noise(t);
        let (a, b) = (T::lit(a), T::lit(b));
        let zi = z.item(i);
        for (o, &n) in out.data_mut()[i * per..(i + 1) * per].iter_mut().zip(zi) {
            *o = a * *o + b * n;
        }
    }
    Ok(out)
}

/// Markovian posterior from predicted noise: returns `(mean, σ_t²)`.
///
/// `mean = (x_t - (1-α_t)/√(1-ᾱ_t) · z) / √α_t`.
pub fn posterior_params<T: Float>(
    xt: &DiffusedState<T>,
    predicted_noise: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<(Tensor<T>, f64)> {
    let t = xt.t;
    s.check_step(t)?;
    same_shape(&xt.value, predicted_noise, "posterior noise")?;
    let coef = T::lit((1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt());
    let inv_sqrt_alpha = T::lit(1.0 / s.alpha(t).sqrt());
    let mean = xt.value.zip_map(predicted_noise, |x, z| (x - coef * z) * inv_sqrt_alpha);
    Ok((mean, s.posterior_variance(t)))
}

/// Clean-signal estimate `(x_t - √(1-ᾱ_t)·z) / √ᾱ_t`.
pub fn predict_x0<T: Float>(
    xt: &DiffusedState<T>,
    predicted_noise: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_step(xt.t)?;
    same_shape(&xt.value, predicted_noise, "x0 prediction noise")?;
    let (a, b) = s.signal_noise(xt.t);
    let (inv_a, b) = (T::lit(1.0 / a), T::lit(b));
    Ok(xt.value.zip_map(predicted_noise, |x, z| (x - b * z) * inv_a))
}

/// Deterministic implicit step from level `t` to `t_prev < t`:
///
/// `√ᾱ_prev · (x_t - √(1-ᾱ_t)·z)/√ᾱ_t + √(1-ᾱ_prev)·z`.
pub fn ddim_mean<T: Float>(
    xt: &DiffusedState<T>,
    predicted_noise: &Tensor<T>,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let t = xt.t;
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::InvalidParameter(format!("implicit step needs t_prev < t, got {t_prev} >= {t}")));
    }
    same_shape(&xt.value, predicted_noise, "implicit step noise")?;
    let (sa, sb) = s.signal_noise(t);
    let (pa, pb) = s.signal_noise(t_prev);
    let (k_x, k_z) = (pa / sa, pb - pa * sb / sa);
    let (k_x, k_z) = (T::lit(k_x), T::lit(k_z));
    Ok(xt.value.zip_map(predicted_noise, |x, z| k_x * x + k_z * z))
}

/// Non-Markovian mean with variance `λ²`:
/// `√ᾱ_prev·x̂0 + √(1-ᾱ_prev-λ²)·z`, where `x̂0` is predicted from `z`.
///
/// `λ² = σ_t²` with `t_prev = t-1` reproduces the Markovian posterior mean;
/// `λ² = 0` is the deterministic implicit step.
pub fn generalized_mean<T: Float>(
    xt: &DiffusedState<T>,
    predicted_noise: &Tensor<T>,
    t_prev: usize,
    lambda_sq: f64,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= xt.t {
        return Err(Error::InvalidParameter(format!("need t_prev < t, got {t_prev} >= {}", xt.t)));
    }
    let x0 = predict_x0(xt, predicted_noise, s)?;
    let prev = s.alpha_bar(t_prev);
    let rem = 1.0 - prev - lambda_sq;
    if rem < -1e-12 {
        return Err(Error::InvalidParameter(format!("lambda² {lambda_sq} exceeds 1 - ᾱ_prev = {}", 1.0 - prev)));
    }
    let (a, b) = (T::lit(prev.sqrt()), T::lit(rem.max(0.0).sqrt()));
    Ok(x0.zip_map(predicted_noise, |x, z| a * x + b * z))
}
