//! Multivariate time-series anomaly detection with multi-scale patch
//! embeddings, a vector-quantized codebook coreset, dual anomaly scores and
//! online test-time adaptation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ndmath;
pub mod network;
pub mod patching;
pub mod pipeline;
pub mod scoring;
pub mod train;
pub mod tta;
pub mod vq;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use error::{CometError, Result};
pub use pipeline::{Detector, ScoreSeries};
pub use train::{train, Checkpoint};
