//! Desk-scale experiment plumbing: toy data, training, ablations, gradient
//! checks and throughput benchmarks.

pub mod ablation;
pub mod bench;
pub mod dataset;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use dataset::{make_toy_dataset, Dataset, Sample, ToyDatasetSpec};
pub use train::{evaluate, train, train_with, EpochStats, RunReport, RunTiming, TrainConfig, TrainOutcome};
