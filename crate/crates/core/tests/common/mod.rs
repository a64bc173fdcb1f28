#![allow(dead_code)]

pub mod oracle;

use comet::config::RunConfig;
use comet::data::{standardize, synthesize, Dataset, SyntheticSpec};
use comet::ndmath::{Matrix, Rng};
use comet::patching::ScaleSpec;
use comet::train::{train, Checkpoint};

/// Small model that trains on the default synthetic corpus in seconds.
pub fn desk_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.model.d = 32;
    c.model.d_core = 16;
    c.model.codebook_size = 32;
    c.train.batch_size = 8;
    c.train.learning_rate = 2e-3;
    c.tta.batch_windows = Some(8);
    c.tta.learning_rate = Some(1e-2);
    c
}

/// Tiny model for exhaustive checks.
pub fn toy_config(d: usize, d_core: usize, m: usize, scales: &[(usize, usize)], len: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d = d;
    c.model.d_core = d_core;
    c.model.codebook_size = m;
    c.model.scales = scales.iter().map(|&(patch, stride)| ScaleSpec { patch, stride }).collect();
    c.window.length = len;
    c.window.stride = len / 2;
    c.train.batch_size = 4;
    c.scoring.n_neighbors = 3;
    c.scoring.n_sigma = 3;
    c
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn corpus(drift: f64, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        drift,
        seed,
        ..SyntheticSpec::default()
    };
    standardize(&synthesize(&spec).unwrap(), 1e-8).unwrap()
}

pub fn trained(cfg: &RunConfig, data: &Dataset) -> Checkpoint {
    train(&data.train.values, cfg, data.stats.clone(), |_| {}).unwrap().checkpoint
}

/// The desk model trained once on the drifted corpus, shared per test binary.
pub fn shared_drift_model() -> &'static (Checkpoint, Dataset) {
    static CELL: std::sync::OnceLock<(Checkpoint, Dataset)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let data = corpus(2.0, 42);
        let ckpt = trained(&desk_config(42), &data);
        (ckpt, data)
    })
}
