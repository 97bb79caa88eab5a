//! Data ingestion, stage execution, configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod trainer;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_kv, DataOptions, OptimizerSpec, TrainConfig, SEED_ENV};
pub use dataset::{image_paths, Augmentation, DatasetSpec, PatchStream};
pub use trainer::{data_rng, validation_loss, Trainer};

use crate::error::{Error, Result};

/// Patch stream described by the `data.*` settings of `config`.
pub fn prepare_dataset(config: &TrainConfig) -> Result<PatchStream> {
    let dir = config
        .data
        .dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.dir is not set".into()))?;
    let spec = DatasetSpec {
        paths: image_paths(dir)?,
        crop_size: config.data.crop_size,
        augmentations: config.data.augmentations.clone(),
        rescale_target: config.data.rescale_target,
    };
    PatchStream::new(spec, data_rng(config.seed))
}
