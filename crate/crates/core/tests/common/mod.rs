#![allow(dead_code)]

use actlumos::clipgen::{generate_dataset, Dims, SyntheticDataset};
use actlumos::encoder::{EncoderConfig, StageStride};
use actlumos::model::Architecture;
use actlumos::sampler::AugmentParams;
use actlumos::trainer::{ClipStore, Stage, TrainConfig};

/// Small enough to train a few epochs in well under a second.
pub fn micro_architecture() -> Architecture {
    let encoder = EncoderConfig {
        channels: 8,
        stages: vec![
            StageStride { temporal: 2, spatial: 4 },
            StageStride { temporal: 1, spatial: 2 },
            StageStride { temporal: 1, spatial: 1 },
        ],
    };
    Architecture { encoder, head_layers: 1, head_heads: 2, ff_mult: 2 }
}

pub fn micro_dims() -> Dims {
    Dims::new(8, 16, 16)
}

pub fn micro_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed: 3,
        architecture: micro_architecture(),
        augment: AugmentParams { out_frames: 4, ..AugmentParams::default() },
        batch_ssl: 8,
        ssl_extra_clips: 8,
        ..TrainConfig::for_stage(stage)
    }
}

pub fn micro_dataset(classes: usize, per_class: usize) -> SyntheticDataset {
    generate_dataset(classes, per_class, micro_dims(), 5).unwrap()
}

pub fn store(dataset: &SyntheticDataset) -> ClipStore {
    ClipStore::new(dataset, TrainConfig::default().retinex).unwrap()
}
