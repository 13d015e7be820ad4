//! Training, evaluation, checkpoints and regime experiments.

mod checkpoint;
mod config;
mod experiment;
mod metrics;
mod split;
mod trainer;

pub use checkpoint::{fingerprint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataShape, Regime, TrainConfig};
pub use experiment::{run_experiment, ExperimentReport, ExperimentRow, RegimeSummary, Verdict};
pub use metrics::auroc;
pub use split::{split_cohort, split_indices, PreparedSplits, Split, SplitIndices};
pub use trainer::{
    data_shape, evaluate, evaluate_model, history_csv, predict, prepare, train, train_prepared, EpochRecord, EvalReport,
    PreparedData, TrainOutcome, TrainState,
};
