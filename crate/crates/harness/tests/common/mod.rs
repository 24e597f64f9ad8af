#![allow(dead_code)]

use std::path::{Path, PathBuf};

use maco_core::synth::{write_dataset, DatasetParams};
use maco_harness::config::{NetConfig, TrainConfig};

/// Small cardiac dataset: 8 train, 2 val, 2 test at 64x64.
pub fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    write_dataset(&data, 12, &DatasetParams::default(), [8.0, 2.0, 2.0]).expect("dataset");
    data
}

/// A config that trains in a few seconds.
pub fn quick_config(data: &Path, epochs: usize) -> TrainConfig {
    TrainConfig {
        data_dir: data.to_path_buf(),
        epochs,
        learning_rate: 1e-3,
        net: NetConfig { depth: 2, base_channels: 4, groups: 2, ..NetConfig::default() },
        ..TrainConfig::default()
    }
}
