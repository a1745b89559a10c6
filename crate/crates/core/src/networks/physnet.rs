//! Ambient-light (A-Net) and inverse-transmission (T-Net) estimators.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Conv, Prelu};
use crate::autograd::{ConvSpec, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// One `3×3` or `1×1` convolution followed by PReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvLayer {
    pub const fn new(filters: usize, kernel: usize, padding: usize, dilation: usize) -> Self {
        Self { filters, kernel, padding, dilation }
    }

    fn preserves_size(&self) -> bool {
        self.kernel % 2 == 1 && self.padding == self.dilation * (self.kernel - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysNetConfig {
    /// Layers before the global pool.
    pub anet_features: Vec<ConvLayer>,
    /// Layers after the global pool; the last one sets the ambient channel count (1 or 3).
    pub anet_head: Vec<ConvLayer>,
    /// The last layer sets the transmission channel count (1 or 3).
    pub tnet_layers: Vec<ConvLayer>,
}

impl Default for PhysNetConfig {
    fn default() -> Self {
        Self {
            anet_features: vec![ConvLayer::new(3, 3, 1, 1), ConvLayer::new(3, 3, 1, 1)],
            anet_head: vec![ConvLayer::new(3, 1, 0, 1), ConvLayer::new(3, 1, 0, 1)],
            tnet_layers: vec![
                ConvLayer::new(8, 3, 1, 1),
                ConvLayer::new(8, 3, 2, 2),
                ConvLayer::new(8, 3, 5, 5),
                ConvLayer::new(1, 3, 1, 1),
            ],
        }
    }
}

impl PhysNetConfig {
    /// Ambient estimate collapsed to a single gray channel.
    pub fn single_channel_ambient() -> Self {
        let mut cfg = Self::default();
        cfg.anet_head.last_mut().expect("head").filters = 1;
        cfg
    }

    pub fn ambient_channels(&self) -> usize {
        self.anet_head.last().map_or(0, |l| l.filters)
    }

    pub fn transmission_channels(&self) -> usize {
        self.tnet_layers.last().map_or(0, |l| l.filters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anet_features.is_empty() || self.anet_head.is_empty() || self.tnet_layers.is_empty() {
            return Err(Error::Config("A-Net and T-Net need at least one layer in each section".into()));
        }
        for l in self.anet_features.iter().chain(&self.tnet_layers) {
            if !l.preserves_size() || l.filters == 0 {
                return Err(Error::Config(format!("layer {l:?} does not preserve spatial size")));
            }
        }
        if self.anet_head.iter().any(|l| l.kernel != 1 || l.padding != 0 || l.filters == 0) {
            return Err(Error::Config("A-Net head layers must be 1x1 without padding".into()));
        }
        for (what, c) in [("ambient", self.ambient_channels()), ("transmission", self.transmission_channels())] {
            if c != 1 && c != 3 {
                return Err(Error::Config(format!("{what} estimate must have 1 or 3 channels, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stack {
    layers: Vec<(Conv, Prelu)>,
}

impl Stack {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, mut cin: usize, layers: &[ConvLayer]) -> (Self, usize) {
        let mut out = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            let spec = ConvSpec::same(l.padding, l.dilation);
            let conv = Conv::new(b, &format!("{name}.{i}.conv"), cin, l.filters, l.kernel, spec);
            let act = Prelu::new(b, &format!("{name}.{i}.act"));
            out.push((conv, act));
            cin = l.filters;
        }
        (Self { layers: out }, cin)
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        for (conv, act) in &self.layers {
            h = conv.forward(g, ps, &h);
            h = act.forward(g, ps, &h);
        }
        h
    }
}

/// Layer layout of A-Net and T-Net.
#[derive(Clone, Debug)]
pub struct PhysNet {
    config: PhysNetConfig,
    anet_features: Stack,
    anet_head: Stack,
    tnet: Stack,
}

impl PhysNet {
    pub fn new<T: Float>(config: PhysNetConfig, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut a = Builder::new(params, rng, "anet");
        let (anet_features, c) = Stack::new(&mut a, "features", 3, &config.anet_features);
        let (anet_head, _) = Stack::new(&mut a, "head", c, &config.anet_head);
        let mut t = Builder::new(params, rng, "tnet");
        let (tnet, _) = Stack::new(&mut t, "layers", 6, &config.tnet_layers);
        Ok(Self { config, anet_features, anet_head, tnet })
    }

    pub fn config(&self) -> &PhysNetConfig {
        &self.config
    }

    /// Ambient light `[n, 3, 1, 1]` in `(0, 1)`; a single-channel head is repeated over RGB.
    pub fn anet_forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x0: &Var<T>) -> Result<Var<T>> {
        check_rgb(x0)?;
        let h = self.anet_features.forward(g, ps, x0);
        let h = g.global_avg_pool(&h);
        let h = self.anet_head.forward(g, ps, &h);
        let a = g.sigmoid(&h);
        Ok(g.expand_channels(&a, 3))
    }

    /// Inverse transmission `[n, 3, h, w]`, at least 1 everywhere.
    pub fn tnet_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x0: &Var<T>,
        ambient: &Var<T>,
    ) -> Result<Var<T>> {
        check_rgb(x0)?;
        let (n, _, h, w) = x0.value().dims4();
        let a =
            if ambient.value().dims4() == (n, 3, 1, 1) { g.broadcast_spatial(ambient, h, w) } else { ambient.clone() };
        if a.shape() != x0.shape() {
            return Err(Error::ShapeMismatch(format!("ambient {:?} for image {:?}", ambient.shape(), x0.shape())));
        }
        let input = g.concat_channels(x0, &a);
        let raw = self.tnet.forward(g, ps, &input);
        let sp = g.softplus(&raw);
        let t = g.add_scalar(&sp, T::one());
        Ok(g.expand_channels(&t, 3))
    }

    /// `(x0 − A)·T + A` together with the `A` and `T` it was built from.
    pub fn restore<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x0: &Var<T>) -> Result<Restoration<T>> {
        let ambient = self.anet_forward(g, ps, x0)?;
        let inv_t = self.tnet_forward(g, ps, x0, &ambient)?;
        let (_, _, h, w) = x0.value().dims4();
        let a = g.broadcast_spatial(&ambient, h, w);
        let diff = g.sub(x0, &a);
        let scaled = g.mul(&diff, &inv_t);
        let restored = g.add(&scaled, &a);
        Ok(Restoration { ambient, inv_transmission: inv_t, restored })
    }
}

/// Output of the physical branch.
#[derive(Clone, Debug)]
pub struct Restoration<T> {
    /// `[n, 3, 1, 1]`.
    pub ambient: Var<T>,
    /// `[n, 3, h, w]`.
    pub inv_transmission: Var<T>,
    pub restored: Var<T>,
}

fn check_rgb<T: Float>(x: &Var<T>) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != 3 {
        return Err(Error::ShapeMismatch(format!("expected an RGB batch, got {:?}", x.shape())));
    }
    Ok(())
}
