//! Fixtures shared by the benchmarks.

use candle_core::DType;
use tarvis_core::model::{Model, ModelConfig};
use tarvis_core::synthgen::{generate_dataset, Dataset, SceneConfig, SynthConfig};
use tarvis_core::train::{TrainConfig, Trainer};

/// Four 64x64 videos of 8 frames.
pub fn dataset() -> Dataset {
    generate_dataset(&SynthConfig {
        num_videos: 4,
        scene: SceneConfig {
            image_size: (64, 64),
            num_frames: 8,
            ..SceneConfig::default()
        },
        seed: 0,
    })
    .expect("synthetic dataset")
}

pub fn model() -> Model {
    Model::new(&ModelConfig::small(), DType::F32, 0).expect("small model")
}

/// Finetune-only trainer on 4-frame clips with 256 loss points.
pub fn trainer(data: &Dataset) -> Trainer {
    let mut cfg = TrainConfig::default();
    cfg.pretrain.steps = 0;
    cfg.finetune.steps = usize::MAX / 2;
    cfg.finetune.lr_decay_steps.clear();
    cfg.finetune.clip_len = 4;
    cfg.loss.points.num_points = 256;
    Trainer::new(model(), data.clone(), cfg).expect("trainer")
}
