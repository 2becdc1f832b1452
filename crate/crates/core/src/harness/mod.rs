//! Experiment orchestration: run configuration, the proxy → weights → base
//! pipeline, evaluation reports and plot data.

mod config;
mod eval;
mod plot;
mod run;
mod train;

pub use config::{BaseConfig, CancellationConfig, CorpusSource, EvalConfig, Mode, RunConfig, OUT_ENV};
pub use eval::{evaluate, DomainEval, EvalReport};
pub use plot::{emit_plot_data, read_wide, AVERAGE_CSV, BASE_LOSS_CSV, PROXY_LOSS_CSV, STEPWISE_CSV};
pub use run::{
    eval_checkpoint, plot_run, read_stepwise, run, BaseSummary, CorpusSummary, MaskSummary, ProxySummary, RunSummary,
    CANCELLATION_CSV, EVAL_JSON, HOLDOUT_EVERY, PROXY_CHECKPOINT, SUMMARY_JSON, TRAJECTORY_CSV, WEIGHTS_JSON,
};
pub use train::{train_base, BaseOutcome, SamplingSchedule, TrainOutput, TrainState, BASE_CHECKPOINT, BASE_STATE, TRAIN_LOG};
