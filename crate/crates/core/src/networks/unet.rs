//! Noise-prediction U-Net conditioned on the degraded image.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::embed_batch;
use super::layers::{Builder, Conv, GroupNorm, Linear};
use crate::autograd::{ConvSpec, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// Length of the sinusoidal step code fed to the first dense layer.
    pub sinusoid_dim: usize,
    pub time_embed_dim: usize,
    /// Feature-map sizes that get a self-attention block after each residual block.
    pub attention_resolutions: Vec<usize>,
    pub bottleneck_attention: bool,
    pub input_channels: usize,
    pub output_channels: usize,
    pub resolution: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            channel_multipliers: vec![1, 2, 3, 4, 4],
            blocks_per_level: 2,
            sinusoid_dim: 128,
            time_embed_dim: 512,
            attention_resolutions: vec![16],
            bottleneck_attention: true,
            input_channels: 6,
            output_channels: 3,
            resolution: 128,
            norm_groups: 32,
        }
    }
}

impl UNetConfig {
    /// 32×32 model used for the end-to-end tests.
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            sinusoid_dim: 32,
            time_embed_dim: 128,
            resolution: 32,
            norm_groups: 8,
            ..Self::default()
        }
    }

    /// 16×16, 8-channel model small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            sinusoid_dim: 8,
            time_embed_dim: 16,
            attention_resolutions: vec![8],
            resolution: 16,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    pub fn has_attention(&self, resolution: usize) -> bool {
        self.attention_resolutions.contains(&resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be nonempty and positive".into());
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 || self.time_embed_dim == 0 {
            return bad("base channels, blocks per level and embedding width must be positive".into());
        }
        if self.sinusoid_dim == 0 || self.sinusoid_dim % 2 != 0 {
            return bad(format!("sinusoid dimension {} must be positive and even", self.sinusoid_dim));
        }
        let div = 1usize << (self.levels() - 1);
        if self.resolution == 0 || self.resolution % div != 0 {
            return bad(format!("resolution {} not divisible by {div}", self.resolution));
        }
        if self.norm_groups == 0 {
            return bad("norm groups must be positive".into());
        }
        for l in 0..self.levels() {
            if self.level_channels(l) % self.norm_groups != 0 {
                return bad(format!(
                    "{} channels not divisible into {} groups",
                    self.level_channels(l),
                    self.norm_groups
                ));
            }
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, cfg: &UNetConfig) -> Self {
        let mut s = b.scope(name);
        let g = cfg.norm_groups;
        Self {
            norm1: GroupNorm::new(&mut s, "norm1", cin, g),
            conv1: Conv::new(&mut s, "conv1", cin, cout, 3, ConvSpec::same(1, 1)),
            temb: Linear::new(&mut s, "temb_proj", cfg.time_embed_dim, cout),
            norm2: GroupNorm::new(&mut s, "norm2", cout, g),
            conv2: Conv::new(&mut s, "conv2", cout, cout, 3, ConvSpec::same(1, 1)),
            skip: (cin != cout).then(|| Conv::new(&mut s, "skip", cin, cout, 1, ConvSpec::same(0, 1))),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>, temb_act: &Var<T>) -> Var<T> {
        let h = self.norm1.forward(g, ps, x);
        let h = g.silu(&h);
        let h = self.conv1.forward(g, ps, &h);
        let t = self.temb.forward(g, ps, temb_act);
        let h = g.add_channel_bias(&h, &t);
        let h = self.norm2.forward(g, ps, &h);
        let h = g.silu(&h);
        let h = self.conv2.forward(g, ps, &h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x.clone(),
        };
        g.add(&skip, &h)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    norm: GroupNorm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
}

impl Attention {
    fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, c: usize, groups: usize) -> Self {
        let mut s = b.scope(name);
        let pw = ConvSpec::same(0, 1);
        Self {
            norm: GroupNorm::new(&mut s, "norm", c, groups),
            q: Conv::new(&mut s, "q", c, c, 1, pw),
            k: Conv::new(&mut s, "k", c, c, 1, pw),
            v: Conv::new(&mut s, "v", c, c, 1, pw),
            proj: Conv::new(&mut s, "proj_out", c, c, 1, pw),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>) -> Var<T> {
        let (n, c, hh, ww) = x.value().dims4();
        let flat = [n, c, hh * ww];
        let h = self.norm.forward(g, ps, x);
        let q = self.q.forward(g, ps, &h);
        let k = self.k.forward(g, ps, &h);
        let v = self.v.forward(g, ps, &h);
        let q = g.reshape(&q, &flat);
        let k = g.reshape(&k, &flat);
        let v = g.reshape(&v, &flat);
        let scores = g.batch_matmul(&q, true, &k, false);
        let scores = g.scale(&scores, T::lit(1.0 / (c as f64).sqrt()));
        let attn = g.softmax_last(&scores);
        let out = g.batch_matmul(&v, false, &attn, true);
        let out = g.reshape(&out, &[n, c, hh, ww]);
        let out = self.proj.forward(g, ps, &out);
        g.add(x, &out)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<(ResBlock, Option<Attention>)>,
}

impl Stage {
    fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, mut h: Var<T>, temb: &Var<T>) -> Var<T> {
        for (res, attn) in &self.blocks {
            h = res.forward(g, ps, &h, temb);
            if let Some(a) = attn {
                h = a.forward(g, ps, &h);
            }
        }
        h
    }
}

/// Layer layout of the noise predictor; weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv,
    down: Vec<Stage>,
    downsample: Vec<Conv>,
    mid: Stage,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNet {
    /// Registers freshly initialised weights under `prefix` in `params`.
    pub fn new<T: Float>(
        config: UNetConfig,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut b = Builder::new(params, rng, prefix);
        let temb1 = Linear::new(&mut b, "temb.dense0", cfg.sinusoid_dim, cfg.time_embed_dim);
        let temb2 = Linear::new(&mut b, "temb.dense1", cfg.time_embed_dim, cfg.time_embed_dim);
        let conv_in = Conv::new(&mut b, "conv_in", cfg.input_channels, cfg.base_channels, 3, ConvSpec::same(1, 1));
        let groups = cfg.norm_groups;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = cfg.base_channels;
        for level in 0..cfg.levels() {
            let cout = cfg.level_channels(level);
            let attn = cfg.has_attention(cfg.level_resolution(level));
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_level {
                let name = format!("down.{level}.block.{i}");
                let res = ResBlock::new(&mut b, &name, cin, cout, cfg);
                let a = attn.then(|| Attention::new(&mut b, &format!("down.{level}.attn.{i}"), cout, groups));
                blocks.push((res, a));
                cin = cout;
            }
            down.push(Stage { blocks });
            if level + 1 < cfg.levels() {
                let spec = ConvSpec { stride: 2, padding: 1, dilation: 1 };
                downsample.push(Conv::new(&mut b, &format!("down.{level}.downsample"), cin, cin, 3, spec));
            }
        }

        let mut mid = vec![(ResBlock::new(&mut b, "mid.block.0", cin, cin, cfg), None)];
        if cfg.bottleneck_attention {
            mid[0].1 = Some(Attention::new(&mut b, "mid.attn", cin, groups));
        }
        mid.push((ResBlock::new(&mut b, "mid.block.1", cin, cin, cfg), None));
        let mid = Stage { blocks: mid };

        let mut up = Vec::new();
        for level in (0..cfg.levels()).rev() {
            let cout = cfg.level_channels(level);
            let attn = cfg.has_attention(cfg.level_resolution(level));
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_level {
                let input = if i == 0 { cin + cout } else { cin };
                let res = ResBlock::new(&mut b, &format!("up.{level}.block.{i}"), input, cout, cfg);
                let a = attn.then(|| Attention::new(&mut b, &format!("up.{level}.attn.{i}"), cout, groups));
                blocks.push((res, a));
                cin = cout;
            }
            up.push(Stage { blocks });
        }

        let norm_out = GroupNorm::new(&mut b, "norm_out", cin, groups);
        let conv_out = Conv::new(&mut b, "conv_out", cin, cfg.output_channels, 3, ConvSpec::same(1, 1));
        Ok(Self { config, temb1, temb2, conv_in, down, downsample, mid, up, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predicts noise for `x: [n, input_channels, R, R]` at per-item steps `ts`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: &Var<T>, ts: &[usize]) -> Result<Var<T>> {
        let cfg = &self.config;
        let (n, c, h, w) = x.value().dims4();
        if c != cfg.input_channels || h != cfg.resolution || w != cfg.resolution {
            return Err(Error::ShapeMismatch(format!(
                "U-Net expects [n, {}, {r}, {r}], got {:?}",
                cfg.input_channels,
                x.shape(),
                r = cfg.resolution
            )));
        }
        if ts.len() != n {
            return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let code = Var::constant(embed_batch(ts, cfg.sinusoid_dim)?);
        let temb = self.temb1.forward(g, ps, &code);
        let temb = g.silu(&temb);
        let temb = self.temb2.forward(g, ps, &temb);
        let temb = g.silu(&temb);

        let mut h = self.conv_in.forward(g, ps, x);
        let mut skips = Vec::with_capacity(cfg.levels());
        for (level, stage) in self.down.iter().enumerate() {
            h = stage.forward(g, ps, h, &temb);
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(level) {
                h = ds.forward(g, ps, &h);
            }
        }
        h = self.mid.forward(g, ps, h, &temb);
        for (stage, level) in self.up.iter().zip((0..cfg.levels()).rev()) {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(&h, &skip);
            h = stage.forward(g, ps, h, &temb);
            if level > 0 {
                h = g.upsample_nearest2x(&h);
            }
        }
        let h = self.norm_out.forward(g, ps, &h);
        let h = g.silu(&h);
        Ok(self.conv_out.forward(g, ps, &h))
    }
}
