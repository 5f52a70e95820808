//! Sparse-coder training: schedule, Adam updates under the decoder norm
//! constraint, dead-feature handling, early stopping and sweeps.

mod config;
mod dead;
mod run;
mod source;

pub use config::{lr_at, EarlyStop, TrainConfig, L1_GRID_RANGE, LR_GRID_RANGE};
pub use dead::{
    ghost_grad_term, resample_dead, supports_dead_feature_tools, FeatureVitals, HighLossBuffer, ResampleReport,
};
pub use run::{
    cell_label, held_out_metrics, rank_cells, run_cell, sweep, sweep_grid, train, HeldOutMetrics, ResampleEvent,
    StepRecord, SweepCell, TrainFailure, TrainOutcome, Validation,
};
pub use source::{BatchSource, InMemorySource};
