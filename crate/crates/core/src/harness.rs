//! Experiment orchestration: the two-stage training schedule, evaluation,
//! ablation and balance-comparison runners, and gate heatmaps.
//!
//! A run directory holds
//!
//! ```text
//! config.json      full run config and its hash
//! metrics.jsonl    one record per line (eval / update / partition)
//! timing.json      wall-clock, kept apart so metrics stay bit-reproducible
//! checkpoint.txt   final model
//! partition.txt    last emitted partition (BTG variants)
//! balance.json     last balance report
//! report.json      final accuracies
//! FAILED           present only if the run aborted
//! ```

mod heatmap;
mod metrics;
mod report;
mod run;

pub use heatmap::{export_attention_heatmaps, gray, write_pgm, GateSummary, HeatmapExport};
pub use metrics::{
    top1_accuracy, Accuracy, ClassCounts, EvalRecord, MetricsRecord, PartitionRecord, UpdateRecord,
};
pub use report::{
    balance_configs, check_same_data, ladder_configs, run_ablation, run_balance_comparison,
    ComparisonRow, ComparisonTable, RunCache, BALANCE_GRID, LADDER,
};
pub use run::{
    evaluate, evaluate_checkpoint, load_run_hashes, run_training, run_training_on, RunConfig,
    RunReport, RunSummary, Variant,
};
