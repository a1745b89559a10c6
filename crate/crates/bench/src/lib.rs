//! Fixtures shared by the benchmarks.

use physdiff_core::dataset::procedural_scene;
use physdiff_core::image::Image;
use physdiff_core::networks::{ModelBundle, ModelConfig};

/// Desk-sized model with freshly initialised weights.
pub fn desk_model(total_steps: usize) -> ModelBundle<f32> {
    let mut cfg = ModelConfig::desk();
    cfg.schedule.steps = total_steps;
    ModelBundle::new(cfg, 0).expect("desk preset is valid")
}

pub fn scene(size: usize, seed: u64) -> Image {
    procedural_scene(size, seed).expect("positive size")
}
