#![allow(dead_code)]

use ucl_core::config::{Paradigm, RunConfig};
use ucl_core::data::{AugConfig, DatasetId, SupervisedAugConfig, SyntheticConfig};
use ucl_core::eval::KnnConfig;
use ucl_core::models::{ArchConfig, BackboneConfig, ProjectorConfig};
use ucl_core::optim::SgdConfig;
use ucl_core::strategies::StrategyConfig;

pub const SIZE: usize = 8;

/// A synthetic config small enough to train in well under a second.
pub fn tiny(strategy: StrategyConfig, num_tasks: usize, trials: usize) -> RunConfig {
    RunConfig {
        name: "tiny".into(),
        dataset: DatasetId::Synthetic,
        paradigm: Paradigm::UclSimsiam,
        strategy,
        num_tasks,
        classes_per_task: 2,
        epochs: 1,
        batch_size: 8,
        trials,
        arch: ArchConfig {
            backbone: BackboneConfig::TinyConv { width: 2 },
            input_size: SIZE,
            projector: ProjectorConfig { layers: 2, hidden: 8, out: 8, final_norm: true },
            ..ArchConfig::default()
        },
        augment: AugConfig::for_size(SIZE),
        supervised_augment: SupervisedAugConfig { size: SIZE, padding: 1, flip_p: 0.5 },
        knn: KnnConfig { k: 5, ..KnnConfig::default() },
        synthetic: SyntheticConfig {
            num_classes: 2 * num_tasks.max(2),
            train_per_class: 8,
            test_per_class: 4,
            size: SIZE,
            ..SyntheticConfig::default()
        },
        optimizer: SgdConfig { lr: 0.05, ..SgdConfig::default() },
        ..RunConfig::default()
    }
}
