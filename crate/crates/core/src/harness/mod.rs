//! Experiment orchestration: configuration, evaluation metrics and the
//! train → evaluate pipeline.

mod config;
mod eval;
mod run;

pub use config::{default_noise_levels, nearest_key, ConfigError, EvalConfig, ExperimentConfig, KEYS};
pub use eval::{
    eval_downstream, eval_identifiability, eval_prediction_accuracy, eval_random_policy, mean_std,
    misclassification_estimate, run_episode, shd_per_context, train_dense, DownstreamResult, EvalError,
    Identifiability, Misclassification, MIN_CODE_SHARE,
};
pub use run::{run, run_seed, summarize, summarize_log, MetricRow, RunError, RunOutcome, Summary, METRICS_HEADER};
