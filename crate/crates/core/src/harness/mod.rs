//! Experiment configuration, the round loops and report output.

mod config;
mod report;
mod run;
mod setup;

pub use config::{
    Algorithm, ClusterLabels, DataConfig, ExperimentConfig, FoldChoice, FoldSettings, PartitionSpec, Source,
    TrainerSettings, Weighting,
};
pub use report::{emit_report, read_params, read_report, write_params, FoldReport, RunReport};
pub use run::{
    cost_table, run_centralized, run_experiment, BestCheckpoint, ClusterInfo, ClusterSummary, CurvePoint, RunOutcome,
};
pub use setup::{build_federation, ClientData, ClientSummary, Federation};
