//! Experiment harness for the `descriptor-mhe` estimators: configuration
//! loading, seeded data generation, a built-in actuator-style benchmark
//! system, side-by-side benchmark runs, and CSV/JSONL report emission.

pub mod actuator;
pub mod bench;
pub mod config;
pub mod datagen;
pub mod report;

pub use actuator::synthetic_actuator;
pub use bench::{mean_squared_error, run_benchmark, BenchRow, BenchmarkReport, RunOutput};
pub use config::{load_config, DisturbanceProfile, ExperimentConfig, SystemSource};
pub use datagen::generate_data;
pub use report::{emit_report, emit_run, summary_csv};
