//! Noise predictor, physical branch estimators, their composition and accounting.

mod bundle;
pub mod checkpoint;
mod complexity;
mod embed;
mod layers;
mod physnet;
mod unet;

pub use bundle::{phi_from_parts, phi_transform, ModelBundle, ModelConfig, PhiOutput, Weights};
pub use complexity::{
    anet_complexity, count_complexity, layer_stack_complexity, tnet_complexity, unet_complexity, Complexity,
    ComplexityReport,
};
pub use embed::{embed_batch, sinusoidal_embed};
pub use physnet::{ConvLayer, PhysNet, PhysNetConfig, Restoration};
pub use unet::{UNet, UNetConfig};
