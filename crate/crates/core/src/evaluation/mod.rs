//! Segmentation metrics, the federated fold splitter and metric reports.

mod folds;
mod metrics;
mod report;

pub use folds::{build_folds, ClientFolds, ClientSplit, FoldPlan};
pub use metrics::{dice_score, hausdorff95, percentile, Mask3, MaskPair};
pub use report::{aggregate_report, MetricsReport, SampleMetrics, Summary};
