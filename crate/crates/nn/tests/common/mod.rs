#![allow(dead_code)]

use unshadow_core::dataset::{generate_sample, DatasetConfig, TrainingSample};
use unshadow_core::render::RenderConfig;
use unshadow_core::scene::{generate_scene, SceneConfig};
use unshadow_nn::pipeline::{ModelConfig, PipelineState};

pub const RES: usize = 32;

/// Cheap 32x32 renders with a visible object.
pub fn samples(n: usize, base_seed: u64) -> Vec<TrainingSample> {
    let mut scene_cfg = SceneConfig::default();
    scene_cfg.camera.resolution = RES;
    scene_cfg.lighting.env_resolution = 16;
    let cfg = DatasetConfig {
        render: RenderConfig {
            samples_per_pixel: 4,
            shadow_samples: 8,
            seed: 1,
            resolution: 0,
        },
        ..DatasetConfig::default()
    };
    let mut out = Vec::new();
    let mut seed = base_seed;
    while out.len() < n {
        let scene = generate_scene(seed, &scene_cfg).unwrap();
        if let Ok(s) = generate_sample(&scene, &format!("scene_{seed}"), &cfg) {
            if !s.m_o.is_empty() {
                out.push(s);
            }
        }
        seed += 1;
    }
    out
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        levels: 2,
        base_channels: 4,
        seed: 5,
    }
}

/// Every parameter value, in `named_vars` order.
pub fn snapshot(state: &PipelineState, prefix: &str) -> Vec<(String, Vec<u32>)> {
    state
        .named_vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, v)| {
            let vals: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            (n, vals.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}
