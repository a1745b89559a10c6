use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::physnet::{PhysNet, PhysNetConfig};
use super::unet::{UNet, UNetConfig};
use crate::autograd::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::schedule::{DiffusedState, NoiseSchedule, ScheduleConfig};
use crate::tensor::{Float, Tensor};

/// Everything needed to rebuild the networks and the schedule they were trained with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub physnet: PhysNetConfig,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            unet: UNetConfig::desk(),
            schedule: ScheduleConfig { steps: 200, ..ScheduleConfig::default() },
            ..Self::default()
        }
    }

    pub fn tiny() -> Self {
        Self {
            unet: UNetConfig::tiny(),
            schedule: ScheduleConfig { steps: 50, ..ScheduleConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.physnet.validate()?;
        if self.unet.input_channels != 6 || self.unet.output_channels != 3 {
            return Err(Error::Config("the noise predictor must map 6 input channels to 3".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

/// Which weight set drives a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Ema,
}

/// The three networks' weights, their EMA shadow, the schedule and the step counter.
///
/// Parameter names are prefixed `unet.`, `anet.` and `tnet.`.
#[derive(Clone, Debug)]
pub struct ModelBundle<T = f32> {
    config: ModelConfig,
    schedule: NoiseSchedule,
    unet: UNet,
    physnet: PhysNet,
    params: ParamSet<T>,
    ema: ParamSet<T>,
    step: u64,
}

impl<T: Float> ModelBundle<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let unet = UNet::new(config.unet.clone(), &mut params, &mut rng, "unet")?;
        let physnet = PhysNet::new(config.physnet.clone(), &mut params, &mut rng)?;
        let ema = params.clone();
        Ok(Self { config, schedule, unet, physnet, params, ema, step: 0 })
    }

    /// Rebuilds the layout for `config` and installs the given weights.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>, ema: ParamSet<T>, step: u64) -> Result<Self> {
        let mut bundle = Self::new(config, 0)?;
        for (name, set) in [("weights", &params), ("EMA shadow", &ema)] {
            if set.len() != bundle.params.len() {
                return Err(Error::Checkpoint(format!(
                    "{name} hold {} tensors, layout needs {}",
                    set.len(),
                    bundle.params.len()
                )));
            }
            for (want, got) in bundle.params.entries().iter().zip(set.entries()) {
                if want.name != got.name || want.value.shape() != got.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected {} {:?}, found {} {:?}",
                        want.name,
                        want.value.shape(),
                        got.name,
                        got.value.shape()
                    )));
                }
            }
        }
        bundle.params = params;
        bundle.ema = ema;
        bundle.step = step;
        Ok(bundle)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn physnet(&self) -> &PhysNet {
        &self.physnet
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn ema(&self) -> &ParamSet<T> {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.ema
    }

    pub fn weights(&self, which: Weights) -> &ParamSet<T> {
        match which {
            Weights::Raw => &self.params,
            Weights::Ema => &self.ema,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn resolution(&self) -> usize {
        self.config.unet.resolution
    }

    pub fn cast<U: Float>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            unet: self.unet.clone(),
            physnet: self.physnet.clone(),
            params: self.params.cast(),
            ema: self.ema.cast(),
            step: self.step,
        }
    }

    /// Noise prediction for `x_t` conditioned on `x0`, without recording gradients.
    pub fn predict_noise(&self, xt: &Tensor<T>, x0: &Tensor<T>, ts: &[usize], which: Weights) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let input = g.concat_channels(&Var::constant(xt.clone()), &Var::constant(x0.clone()));
        Ok(self.unet.forward(&mut g, self.weights(which), &input, ts)?.to_tensor())
    }

    /// `(A, T, (x0 − A)·T + A)` without recording gradients.
    pub fn restore(&self, x0: &Tensor<T>, which: Weights) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let r = self.physnet.restore(&mut g, self.weights(which), &Var::constant(x0.clone()))?;
        Ok((r.ambient.to_tensor(), r.inv_transmission.to_tensor(), r.restored.to_tensor()))
    }
}

/// `√ᾱ_t·R + √(1−ᾱ_t)·z′` with per-item steps, recorded on `g`.
pub fn phi_from_parts<T: Float>(
    g: &mut Graph<T>,
    restored: &Var<T>,
    noise: &Var<T>,
    ts: &[usize],
    s: &NoiseSchedule,
) -> Var<T> {
    let (a, b): (Vec<T>, Vec<T>) = ts
        .iter()
        .map(|&t| {
            let (a, b) = s.signal_noise(t);
            (T::lit(a), T::lit(b))
        })
        .unzip();
    let r = g.scale_batch(restored, &a);
    let z = g.scale_batch(noise, &b);
    g.add(&r, &z)
}

#[derive(Clone, Debug)]
pub struct PhiOutput<T> {
    pub value: Tensor<T>,
    pub noise: Tensor<T>,
    pub restored: Tensor<T>,
}

/// Diffused-restoration estimate `y′_t` for the state `x_t` conditioned on `x0`.
pub fn phi_transform<T: Float>(
    x0: &Tensor<T>,
    xt: &DiffusedState<T>,
    bundle: &ModelBundle<T>,
    which: Weights,
) -> Result<PhiOutput<T>> {
    if xt.t == 0 || xt.t > bundle.schedule().steps() {
        return Err(Error::InvalidParameter(format!("phi transform needs 1 <= t <= T, got {}", xt.t)));
    }
    let n = x0.shape()[0];
    let ts = vec![xt.t; n];
    let noise = bundle.predict_noise(&xt.value, x0, &ts, which)?;
    let (_, _, restored) = bundle.restore(x0, which)?;
    let mut g = Graph::inference();
    let value =
        phi_from_parts(&mut g, &Var::constant(restored.clone()), &Var::constant(noise.clone()), &ts, bundle.schedule())
            .to_tensor();
    Ok(PhiOutput { value, noise, restored })
}
