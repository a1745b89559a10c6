//! Dual-chain implicit sampling with superposition and distribution shifting.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::{ModelBundle, Weights};
use crate::schedule::{ddim_mean, posterior_params, DiffusedState, NoiseSchedule};
use crate::tensor::{Float, Tensor};

/// Strictly increasing sub-sequence `τ_1 < … < τ_S` of `1..=T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SamplerPlan {
    total_steps: usize,
    tau: Vec<usize>,
}

impl SamplerPlan {
    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}

/// `τ_i = ⌊(i−1)·T/S⌋ + 1` for `i = 1..=S`.
pub fn plan_subsequence(total_steps: usize, count: usize) -> Result<SamplerPlan> {
    if count == 0 || count > total_steps {
        return Err(Error::InvalidParameter(format!("need 1 <= S <= T, got S={count}, T={total_steps}")));
    }
    let tau = (0..count).map(|i| i * total_steps / count + 1).collect();
    Ok(SamplerPlan { total_steps, tau })
}

fn check_same<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Elementwise sum of the denoised state and the transformed estimate.
pub fn superpose<T: Float>(theta_step: &Tensor<T>, phi_out: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(theta_step, phi_out)?;
    Ok(theta_step.zip_map(phi_out, |a, b| a + b))
}

/// `(v − 2μ)/√2 + μ`: maps `N(2μ, 2σ²)` back onto `N(μ, σ²)`.
pub fn shift<T: Float>(v: &Tensor<T>, mu: &Tensor<T>) -> Result<Tensor<T>> {
    check_same(v, mu)?;
    let inv = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let two = T::lit(2.0);
    Ok(v.zip_map(mu, |v, m| (v - two * m) * inv + m))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiLevel {
    /// Coefficients and step embedding of the level being produced.
    #[default]
    Destination,
    /// Those of the level being left.
    Source,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Deterministic implicit steps over the planned sub-sequence.
    #[default]
    Implicit,
    /// Markovian posterior steps with fresh noise over all `T` levels.
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerOptions {
    pub phi_level: PhiLevel,
    pub mode: SamplerMode,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { phi_level: PhiLevel::Destination, mode: SamplerMode::Implicit }
    }
}

#[derive(Clone, Debug)]
pub struct EnhanceResult {
    pub enhanced: Image,
    /// Wall time of each transition, largest level first, in seconds.
    pub step_times: Vec<f64>,
    pub steps_used: usize,
}

struct Chain<'a, T: Float> {
    bundle: &'a ModelBundle<T>,
    x0: &'a Tensor<T>,
    restored: Tensor<T>,
    mode: SamplerMode,
    rng: ChaCha8Rng,
}

impl<T: Float> Chain<'_, T> {
    fn schedule(&self) -> &NoiseSchedule {
        self.bundle.schedule()
    }

    fn eps(&self, x: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
        self.bundle.predict_noise(x, self.x0, &[level], Weights::Ema)
    }

    fn phi(&self, eps: &Tensor<T>, level: usize) -> Tensor<T> {
        let (a, b) = self.schedule().signal_noise(level);
        let (a, b) = (T::lit(a), T::lit(b));
        self.restored.zip_map(eps, |r, z| a * r + b * z)
    }

    /// One transition `src → dst` given the noise predicted at `src`.
    fn advance(&mut self, x: &Tensor<T>, eps: &Tensor<T>, src: usize, dst: usize) -> Result<Tensor<T>> {
        let state = DiffusedState { value: x.clone(), t: src };
        match self.mode {
            SamplerMode::Implicit => ddim_mean(&state, eps, dst, self.schedule()),
            SamplerMode::Reference => {
                let (mean, var) = posterior_params(&state, eps, self.schedule())?;
                if var == 0.0 {
                    return Ok(mean);
                }
                let sd = var.sqrt();
                let mut out = mean;
                for m in out.data_mut() {
                    let n: f64 = StandardNormal.sample(&mut self.rng);
                    *m += T::lit(sd * n);
                }
                Ok(out)
            }
        }
    }
}

fn finite<T: Float>(t: &Tensor<T>, step: usize) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("sampler state at step {step}")));
    }
    Ok(())
}

/// Enhances one degraded image. The only randomness in implicit mode is the initial
/// draw of `x′`, seeded by `seed`.
pub fn enhance<T: Float>(
    x0: &Image,
    bundle: &ModelBundle<T>,
    plan: &SamplerPlan,
    seed: u64,
    options: SamplerOptions,
) -> Result<EnhanceResult> {
    let s = bundle.schedule();
    if plan.total_steps() != s.steps() {
        return Err(Error::InvalidParameter(format!(
            "plan built for T={} but the model was trained with T={}",
            plan.total_steps(),
            s.steps()
        )));
    }
    if options.mode == SamplerMode::Reference && plan.len() != s.steps() {
        return Err(Error::InvalidParameter("reference mode walks every level; plan must have S = T".into()));
    }
    let r = bundle.resolution();
    if x0.dims() != (r, r) {
        return Err(Error::ShapeMismatch(format!("model expects {r}x{r} input, got {}x{}", x0.height(), x0.width())));
    }
    let cond = x0.to_tensor::<T>();
    let (_, _, restored) = bundle.restore(&cond, Weights::Ema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Tensor<T> = Tensor::from_fn(cond.shape().to_vec(), |_| {
        let n: f64 = StandardNormal.sample(&mut rng);
        T::lit(n)
    });
    let mut chain = Chain { bundle, x0: &cond, restored, mode: options.mode, rng };
    let tau = plan.tau();
    let phi_at = |src: usize, dst: usize| match options.phi_level {
        PhiLevel::Destination => dst,
        PhiLevel::Source => src,
    };
    let mut times = Vec::with_capacity(tau.len());
    let mut clock = Instant::now();
    let mut lap = |times: &mut Vec<f64>| {
        times.push(clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let last = tau.len() - 1;
    // Noise predicted for x′ at its current level, reused by the next transition.
    let mut cached: Option<(usize, Tensor<T>)> = None;
    let mut y = if tau.len() == 1 {
        let e = chain.eps(&x, tau[0])?;
        chain.phi(&e, tau[0])
    } else {
        let (src, dst) = (tau[last], tau[last - 1]);
        let e = chain.eps(&x, src)?;
        x = chain.advance(&x, &e, src, dst)?;
        let level = phi_at(src, dst);
        let e_phi = chain.eps(&x, level)?;
        let y = chain.phi(&e_phi, level);
        if level == dst {
            cached = Some((dst, e_phi));
        }
        finite(&y, 1)?;
        lap(&mut times);
        y
    };
    for i in (1..last).rev() {
        let (src, dst) = (tau[i], tau[i - 1]);
        let e_y = chain.eps(&y, src)?;
        let mu = chain.advance(&y, &e_y, src, dst)?;
        let e_x = match cached.take() {
            Some((level, e)) if level == src => e,
            _ => chain.eps(&x, src)?,
        };
        x = chain.advance(&x, &e_x, src, dst)?;
        let level = phi_at(src, dst);
        let e_phi = chain.eps(&x, level)?;
        let phi = chain.phi(&e_phi, level);
        if level == dst {
            cached = Some((dst, e_phi));
        }
        y = shift(&superpose(&mu, &phi)?, &mu)?;
        finite(&y, last - i + 1)?;
        lap(&mut times);
    }
    let e_y = chain.eps(&y, tau[0])?;
    let y0 = chain.advance(&y, &e_y, tau[0], 0)?;
    finite(&y0, tau.len())?;
    lap(&mut times);
    Ok(EnhanceResult { enhanced: Image::from_tensor(&y0, 0)?, step_times: times, steps_used: tau.len() })
}
