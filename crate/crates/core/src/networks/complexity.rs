//! Analytic multiply-accumulate and parameter counts.
//!
//! Convolutions cost `out_elems × in_channels × kernel_area` MACs and dense
//! layers `in × out`; attention adds its two `N×N×C` products. Bias adds,
//! normalisation and activations are free. FLOPs are twice the MACs.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use super::physnet::{ConvLayer, PhysNetConfig};
use super::unet::UNetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub macs: u64,
    pub params: u64,
}

impl Complexity {
    pub fn conv(cin: usize, cout: usize, kernel: usize, out_h: usize, out_w: usize) -> Self {
        let k = (cin * kernel * kernel) as u64;
        Self { macs: (out_h * out_w * cout) as u64 * k, params: cout as u64 * (k + 1) }
    }

    pub fn linear(din: usize, dout: usize) -> Self {
        Self { macs: (din * dout) as u64, params: (dout * (din + 1)) as u64 }
    }

    fn group_norm(c: usize) -> Self {
        Self { macs: 0, params: 2 * c as u64 }
    }

    fn prelu() -> Self {
        Self { macs: 0, params: 1 }
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for Complexity {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { macs: self.macs + o.macs, params: self.params + o.params }
    }
}

impl AddAssign for Complexity {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for Complexity {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn res_block(cin: usize, cout: usize, r: usize, temb: usize) -> Complexity {
    let mut c = Complexity::group_norm(cin)
        + Complexity::conv(cin, cout, 3, r, r)
        + Complexity::linear(temb, cout)
        + Complexity::group_norm(cout)
        + Complexity::conv(cout, cout, 3, r, r);
    if cin != cout {
        c += Complexity::conv(cin, cout, 1, r, r);
    }
    c
}

fn attention(ch: usize, r: usize) -> Complexity {
    let n = (r * r) as u64;
    let mut c = Complexity::group_norm(ch);
    for _ in 0..4 {
        c += Complexity::conv(ch, ch, 1, r, r);
    }
    c.macs += 2 * n * n * ch as u64;
    c
}

/// Cost of one forward pass for a single image at the configured resolution.
pub fn unet_complexity(cfg: &UNetConfig) -> Complexity {
    let te = cfg.time_embed_dim;
    let mut total = Complexity::linear(cfg.sinusoid_dim, te) + Complexity::linear(te, te);
    let mut r = cfg.resolution;
    total += Complexity::conv(cfg.input_channels, cfg.base_channels, 3, r, r);
    let mut cin = cfg.base_channels;
    for level in 0..cfg.levels() {
        let cout = cfg.level_channels(level);
        for _ in 0..cfg.blocks_per_level {
            total += res_block(cin, cout, r, te);
            if cfg.has_attention(r) {
                total += attention(cout, r);
            }
            cin = cout;
        }
        if level + 1 < cfg.levels() {
            r /= 2;
            total += Complexity::conv(cin, cin, 3, r, r);
        }
    }
    total += res_block(cin, cin, r, te) + res_block(cin, cin, r, te);
    if cfg.bottleneck_attention {
        total += attention(cin, r);
    }
    for level in (0..cfg.levels()).rev() {
        let cout = cfg.level_channels(level);
        for i in 0..cfg.blocks_per_level {
            let input = if i == 0 { cin + cout } else { cin };
            total += res_block(input, cout, r, te);
            if cfg.has_attention(r) {
                total += attention(cout, r);
            }
            cin = cout;
        }
        if level > 0 {
            r *= 2;
        }
    }
    total + Complexity::group_norm(cin) + Complexity::conv(cin, cfg.output_channels, 3, r, r)
}

/// Conv+PReLU stack cost at a fixed spatial size.
pub fn layer_stack_complexity(mut cin: usize, layers: &[ConvLayer], h: usize, w: usize) -> Complexity {
    let mut total = Complexity::default();
    for l in layers {
        total += Complexity::conv(cin, l.filters, l.kernel, h, w) + Complexity::prelu();
        cin = l.filters;
    }
    total
}

pub fn anet_complexity(cfg: &PhysNetConfig, resolution: usize) -> Complexity {
    let features = layer_stack_complexity(3, &cfg.anet_features, resolution, resolution);
    let c = cfg.anet_features.last().map_or(3, |l| l.filters);
    features + layer_stack_complexity(c, &cfg.anet_head, 1, 1)
}

pub fn tnet_complexity(cfg: &PhysNetConfig, resolution: usize) -> Complexity {
    layer_stack_complexity(6, &cfg.tnet_layers, resolution, resolution)
}

/// Per-network counts in the order U-Net, A-Net, T-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub unet: Complexity,
    pub anet: Complexity,
    pub tnet: Complexity,
}

pub fn count_complexity(unet: &UNetConfig, phys: &PhysNetConfig) -> ComplexityReport {
    ComplexityReport {
        unet: unet_complexity(unet),
        anet: anet_complexity(phys, unet.resolution),
        tnet: tnet_complexity(phys, unet.resolution),
    }
}
