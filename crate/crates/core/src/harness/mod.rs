//! Experiment orchestration: the per-episode selection loop, comparison
//! methods, cost accounting and log output.

pub mod config;
pub mod experiment;
pub mod lengthscale;
pub mod log;
pub mod runner;

pub use config::{CcbpConfig, EvaluationConfig, RunConfig, DEFAULT_GAP_WORLD_LENGTH_SCALE};
pub use experiment::{
    run_cost_sweep, run_experiment, run_experiment_with, run_limited_demo_experiment, sweep_csv, RunSummary, SweepRow,
    EPISODES_FILE, EVAL_FILE, SUMMARY_FILE,
};
pub use lengthscale::{decade_grid, run_length_scale_protocol, synthetic_length_scale_data, LengthScaleProtocol, LengthScaleReport};
pub use log::{EpisodeLog, EvalLog};
pub use runner::{EpisodeStart, InitialStatePool, Runner, RunnerStatus, StepRecord};
