//! Desk-scale monotonic alignment task: synthetic token-to-frame data, a
//! small encoder-decoder whose cross-attention is either the clock score or
//! the dot product, an AdamW trainer, alignment metrics and length sweeps.

mod data;
mod metrics;
mod model;
mod sweep;
mod train;

pub use data::{generate_dataset, AlignmentInstance, Dataset, DatasetConfig};
pub use metrics::{argmax_path, compute_metrics, rescale_path, Metrics, DEFAULT_WINDOW};
pub use model::{shift_frames, sinusoidal_positions, Forward, ModelConfig, TaskShape, ToyModel, Variant};
pub use sweep::{length_sweep, SweepPoint};
pub use train::{batch_gradient, evaluate, train, AdamW, LogRecord, TrainConfig, TrainOutcome};
