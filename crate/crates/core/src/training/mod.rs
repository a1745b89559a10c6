//! Joint optimisation of the noise predictor and the physical branch.

mod losses;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use losses::{compute_losses, loss_at, loss_phi, loss_theta, LossInputs, LossTerms, LossWeights};
pub use optim::{ema_update, Adam, AdamConfig};

use crate::autograd::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::networks::checkpoint::Checkpoint;
use crate::networks::{ModelBundle, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub max_iterations: u64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic writes).
    pub checkpoint_every: u64,
    /// Random horizontal flips of each training pair.
    pub hflip: bool,
    /// T-Net weights stay at their initial values for this many steps while A-Net and
    /// the U-Net train.
    pub tnet_warmup: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-5,
            weight_decay: 0.0,
            ema_decay: 0.999,
            max_iterations: 100_000,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            hflip: true,
            tnet_warmup: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the 32×32 desk model.
    pub fn desk() -> Self {
        Self { learning_rate: 5e-4, max_iterations: 3000, checkpoint_every: 500, tnet_warmup: 300, ..Self::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        self.loss_weights.validate()?;
        self.adam().validate()
    }
}

/// Source of the per-step timesteps and Gaussian noise.
pub trait NoiseSource {
    /// `n` steps drawn uniformly from `1..=steps`.
    fn timesteps(&mut self, n: usize, steps: usize) -> Vec<usize>;
    fn gaussian(&mut self, shape: &[usize]) -> Tensor<f32>;
}

/// ChaCha stream keyed by `(seed, step)`, so any step can be replayed in isolation.
#[derive(Clone, Debug)]
pub struct SeededNoise {
    rng: ChaCha8Rng,
}

impl SeededNoise {
    pub fn for_step(seed: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        Self { rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl NoiseSource for SeededNoise {
    fn timesteps(&mut self, n: usize, steps: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.random_range(1..=steps)).collect()
    }

    fn gaussian(&mut self, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.sample(StandardNormal))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    /// Step counter after the update.
    pub step: u64,
    pub theta: f64,
    pub at: f64,
    pub phi: f64,
    pub total: f64,
}

const TNET_PREFIX: &str = "tnet.";
const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";

/// Model, optimizer state and configuration of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    bundle: ModelBundle<f32>,
    adam: Adam<f32>,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::new(model, config.seed)?;
        let adam = Adam::new(config.adam(), bundle.params());
        Ok(Self { config, bundle, adam })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam_step = ckpt.metadata.get("adam_step").and_then(|v| v.as_u64());
        let adam = match (ckpt.group(ADAM_M), ckpt.group(ADAM_V), adam_step) {
            (Some(m), Some(v), Some(step)) => {
                check_like(m, ckpt.model.params(), ADAM_M)?;
                check_like(v, ckpt.model.params(), ADAM_V)?;
                Adam::from_state(config.adam(), step, m.clone(), v.clone())
            }
            _ => return Err(Error::Checkpoint("checkpoint carries no optimizer state".into())),
        };
        Ok(Self { config, bundle: ckpt.model, adam })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v) = self.adam.moments();
        Checkpoint {
            model: self.bundle.clone(),
            extra_groups: vec![(ADAM_M.into(), m.clone()), (ADAM_V.into(), v.clone())],
            metadata: serde_json::json!({
                "adam_step": self.adam.step_count(),
                "train": self.config,
            }),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn bundle(&self) -> &ModelBundle<f32> {
        &self.bundle
    }

    pub fn bundle_mut(&mut self) -> &mut ModelBundle<f32> {
        &mut self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle<f32> {
        self.bundle
    }

    pub fn step(&self) -> u64 {
        self.bundle.step()
    }

    /// One optimizer step on an explicit batch.
    ///
    /// A non-finite loss leaves weights, moments and the step counter untouched.
    pub fn train_batch(
        &mut self,
        x0: &Tensor<f32>,
        y0: &Tensor<f32>,
        noise: &mut dyn NoiseSource,
    ) -> Result<StepLosses> {
        let n = x0.shape()[0];
        let ts = noise.timesteps(n, self.bundle.schedule().steps());
        let z = noise.gaussian(x0.shape());
        let input = LossInputs { x0, y0, z: &z, ts: &ts };
        let mut g = Graph::new();
        let terms = compute_losses(&mut g, &self.bundle, self.bundle.params(), &input, &self.config.loss_weights)?;
        let value = |v: &crate::autograd::Var<f32>| v.value().data()[0] as f64;
        let (theta, at, phi, total) = (value(&terms.theta), value(&terms.at), value(&terms.phi), value(&terms.total));
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: theta {theta}, at {at}, phi {phi}, timesteps {ts:?}",
                self.step() + 1
            )));
        }
        let mut grads = g.backward(&terms.total);
        drop(terms);
        drop(g);
        if self.step() < self.config.tnet_warmup {
            let frozen: Vec<_> = self
                .bundle
                .params()
                .ids()
                .filter(|&id| self.bundle.params().name(id).starts_with(TNET_PREFIX))
                .collect();
            for id in frozen {
                grads.remove(id);
            }
        }
        if !grads.norm().is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step() + 1)));
        }
        self.adam.update(self.bundle.params_mut(), &grads);
        let weights = self.bundle.params().clone();
        ema_update(self.bundle.ema_mut(), &weights, self.config.ema_decay);
        let step = self.step() + 1;
        self.bundle.set_step(step);
        Ok(StepLosses { step, theta, at, phi, total })
    }

    /// Draws the next batch from `pairs` (degraded, clean) and takes one step.
    pub fn train_step(&mut self, pairs: &[(Image, Image)]) -> Result<StepLosses> {
        let (x0, y0, mut noise) = self.sample_batch(pairs)?;
        self.train_batch(&x0, &y0, &mut noise)
    }

    fn sample_batch(&self, pairs: &[(Image, Image)]) -> Result<(Tensor<f32>, Tensor<f32>, SeededNoise)> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no training pairs".into()));
        }
        let mut noise = SeededNoise::for_step(self.config.seed, self.step());
        let mut raws = Vec::with_capacity(self.config.batch_size);
        let mut refs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (raw, clean) = &pairs[noise.rng().random_range(0..pairs.len())];
            if self.config.hflip && noise.rng().random_bool(0.5) {
                raws.push(raw.flip_horizontal());
                refs.push(clean.flip_horizontal());
            } else {
                raws.push(raw.clone());
                refs.push(clean.clone());
            }
        }
        let x0 = Image::batch_tensor(&raws.iter().collect::<Vec<_>>())?;
        let y0 = Image::batch_tensor(&refs.iter().collect::<Vec<_>>())?;
        Ok((x0, y0, noise))
    }

    /// Trains until `max_iterations`, logging every step and checkpointing periodically.
    ///
    /// `on_step` sees the trainer after each update; an error from it stops the run.
    pub fn run(
        &mut self,
        pairs: &[(Image, Image)],
        options: &RunOptions,
        mut on_step: impl FnMut(&Trainer, &StepLosses) -> Result<()>,
    ) -> Result<()> {
        let mut log = match &options.log_path {
            Some(p) => Some(LossLog::open(p, self.step() > 0)?),
            None => None,
        };
        let start = Instant::now();
        while self.step() < self.config.max_iterations {
            let losses = self.train_step(pairs)?;
            if let Some(log) = log.as_mut() {
                log.append(&losses, start.elapsed().as_secs_f64())?;
            }
            on_step(self, &losses)?;
            let every = self.config.checkpoint_every;
            if let Some(path) = &options.checkpoint_path {
                if every > 0 && losses.step % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        if let Some(path) = &options.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }
}

fn check_like(a: &ParamSet<f32>, b: &ParamSet<f32>, what: &str) -> Result<()> {
    let same = a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape());
    if !same {
        return Err(Error::Checkpoint(format!("{what} does not match the model layout")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Comma-separated per-step loss log.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,loss_theta,loss_at,loss_phi,loss_total,wall_time_s";

    /// Appends when `resume` is set and the file exists, otherwise starts a new file.
    pub fn open(path: &Path, resume: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if resume && exists { OpenOptions::new().append(true).open(path) } else { File::create(path) }
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        if !(resume && exists) {
            writeln!(log.out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    pub fn append(&mut self, l: &StepLosses, wall: f64) -> Result<()> {
        writeln!(self.out, "{},{:.6e},{:.6e},{:.6e},{:.6e},{wall:.3}", l.step, l.theta, l.at, l.phi, l.total)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
