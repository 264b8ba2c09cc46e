//! Splits, metrics, training and the evaluation protocols.

pub mod grid;
pub mod metrics;
pub mod mmd;
pub mod protocols;
pub mod report;
pub mod split;
pub mod train;

pub use grid::{check_grid_values, GridPoint, HyperGrid};
pub use metrics::{alpha_accuracy, mape, MeanStd, Metrics};
pub use mmd::{median_bandwidth, mmd_squared, mmd_squared_with_grad};
pub use protocols::{
    evaluate, family_name, predict_lives, run_experiment, seen_unseen_report, sweep_retrain, sweep_usable_cycles,
    transfer_run, ExperimentConfig, ExperimentResult, SeedRun, SeenUnseen, TransferMode, TransferOutcome,
    DEFAULT_ALPHA,
};
pub use report::{curve_csv, ConditionRow, CurvePoint, CurveStat, EvalReport, ReportRow};
pub use split::{split_dataset, split_dataset_with, Granularity, Split, SplitAssignment, SplitOptions, SplitRatios};
pub use train::{continue_training, train_model, Adaptation, EpochRecord, TrainConfig, TrainOutcome};
