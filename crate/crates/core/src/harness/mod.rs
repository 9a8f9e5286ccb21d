//! Task streams, continual-learning metrics and experiment protocols.

mod experiment;
mod metrics;
mod stream;

pub use experiment::{
    prepare_replicate, prepare_replicate_with, run_continual, run_experiment, run_grid, run_grid_with, zero_shot_eval,
    Adaptation, EfficiencyCounters, ExperimentConfig, GridFailure, GridRun, GridSummary, HostKind, Protocol, Replicate,
    RunRecord, RunSpec, DESK_LR,
};
pub use metrics::{compute_metrics, MetricTable};
pub use stream::{make_synthetic_stream, StreamConfig, TaskSplit, TaskStream};
