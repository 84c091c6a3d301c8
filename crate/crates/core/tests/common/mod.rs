#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use cadgmm::data::{load_and_encode, DatasetRecipe, LabeledDataset};
use cadgmm::trainer::{LossWeights, TrainConfig};
use cadgmm::{ModelConfig, SeededRng};

pub const FEATURES: usize = 5;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dim: FEATURES,
        encoder_hidden: vec![8],
        graph_dim: 8,
        latent_dim: 2,
        decoder_hidden: vec![8],
        estimator_hidden: vec![6],
        mixtures: 2,
        k: 3,
        ..ModelConfig::satellite()
    }
}

pub fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 32,
        learning_rate: 1e-3,
        seed: 0,
        model: tiny_model(),
        weights: LossWeights::new(0.1, 0.005, 0.005).unwrap(),
        checkpoint_interval: 0,
    }
}

/// Normals on a low-dimensional curve, anomalies uniform over the box.
pub fn synthetic_csv(normals: usize, anomalies: usize, seed: u64) -> String {
    let mut rng = SeededRng::new(seed);
    let mut rows = Vec::new();
    for _ in 0..normals {
        let t = rng.uniform(0.0, 1.0);
        let v: Vec<String> = (0..FEATURES)
            .map(|j| format!("{:.5}", 0.5 + 0.3 * (t * (j + 1) as f64).sin() + rng.uniform(-0.02, 0.02)))
            .collect();
        rows.push(format!("{},normal", v.join(",")));
    }
    for _ in 0..anomalies {
        let v: Vec<String> = (0..FEATURES).map(|_| format!("{:.5}", rng.uniform(-0.5, 1.5))).collect();
        rows.push(format!("{},attack", v.join(",")));
    }
    let mut out = String::new();
    for i in rng.permutation(rows.len()) {
        out.push_str(&rows[i]);
        out.push('\n');
    }
    out
}

pub fn write_synthetic(dir: &Path, normals: usize, anomalies: usize, seed: u64) -> DatasetRecipe {
    std::fs::write(dir.join("toy.csv"), synthetic_csv(normals, anomalies, seed)).unwrap();
    let text = "name = toy\nsource = toy.csv\nanomaly_labels = attack\nexpected_features = 5\n";
    std::fs::write(dir.join("toy.recipe"), text).unwrap();
    DatasetRecipe::from_file(&dir.join("toy.recipe")).unwrap()
}

pub fn synthetic_dataset(normals: usize, anomalies: usize, seed: u64) -> LabeledDataset {
    let dir = tempfile::tempdir().unwrap();
    load_and_encode(&write_synthetic(dir.path(), normals, anomalies, seed)).unwrap()
}
