//! Configuration files, synthetic data, benchmarking, toy training and the
//! command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod features;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use bench::{run_benchmark, BenchOptions, BenchmarkReport};
pub use config::{RunConfig, RunMode};
pub use features::{generate_synthetic_features, FeatureFile, FeatureItem, LengthDist};
pub use gradcheck::model_grad_check;
pub use train::{train_toy, Adam, ToyConfig, ToyTask, TrainReport};
