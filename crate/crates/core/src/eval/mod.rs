//! Evaluation: accuracy reports, alpha exports, latency benchmarks,
//! and the experiment driver.

pub mod bench;
pub mod experiment;
pub mod metrics;

pub use bench::{LatencyReport, DEFAULT_REPS, DEFAULT_WARMUP};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentRun, ModelKind};
pub use metrics::{accuracy_fraction, evaluate, AlphaHistogram, EvalReport};
