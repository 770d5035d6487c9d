#![allow(dead_code)]

use scaffold_rf::data::{build_dataset, Dataset, DatasetConfig};
use scaffold_rf::nets::{AppearanceConfig, ParamSet, ShapeConfig};
use scaffold_rf::render::RenderConfig;
use scaffold_rf::train::TrainConfig;

/// 8^3 decoder with a narrow MLP.
pub fn tiny_shape() -> ShapeConfig {
    ShapeConfig {
        latent_dim: 8,
        hidden: 32,
        seed_res: 1,
        seed_channels: 4,
        block_channels: [4, 4, 2],
    }
}

pub fn tiny_appearance() -> AppearanceConfig {
    AppearanceConfig {
        width: 16,
        frequencies: 2,
        latent_dim: 8,
    }
}

pub fn tiny_render() -> RenderConfig {
    RenderConfig {
        n_stratified: 8,
        n_importance: 8,
        ..RenderConfig::default()
    }
}

pub fn tiny_dataset(n_objects: usize) -> Dataset {
    build_dataset(&DatasetConfig {
        n_objects,
        n_views: 3,
        resolution: 8,
        image_size: 12,
        samples_per_ray: 64,
        ..DatasetConfig::default()
    })
    .expect("dataset")
}

pub fn tiny_train(iterations: usize, shape_iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        shape_iterations: Some(shape_iterations),
        rays_per_step: 16,
        render: tiny_render(),
        ..TrainConfig::default()
    }
}

pub fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}

pub fn same_bits(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.name == y.name && bits(&x.values) == bits(&y.values))
}
