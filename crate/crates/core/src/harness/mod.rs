//! Tasks, configuration, training, comparison and benchmarks behind the CLI.

pub mod bench;
pub mod config;
pub mod rng;
pub mod tasks;
pub mod train;

pub use config::{load_config, parse_config, LrDecay, RunConfig, TrainConfig};
pub use tasks::{Task, TaskKind, TaskSpec};
pub use train::{compare, read_csv, train, train_to_dir, write_csv, Comparison, RunMetrics, TrainOutcome, CSV_HEADER};
