//! Metric suite: sparsity, reconstruction quality, downstream
//! cross-entropy, feature liveness and max-activating examples.

mod metrics;
mod report;
mod suite;

pub use metrics::{
    alive_features, cosine, cross_entropy, explained_variance, l0_per_row, l0_stats, pct_ce_recovered,
    per_example_ce, Activating, AliveTracker, CosineAccumulator, EvAccumulator, L0Accumulator, L0Stats,
    MaxActivatingSet, DEGENERATE_CE_GAP,
};
pub use report::{render_markdown, sort_rows, EvalRow, COLUMNS, NOT_AVAILABLE};
pub use suite::{ce_suite, evaluate_coder, CeTriplet, CoderEvaluation, EvalOptions};
