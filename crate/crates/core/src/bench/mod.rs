//! Training runs, convergence traces and speedup reports.

mod compare;
mod train;

pub use compare::{
    compare, mean_history, run_many, seed_list, summarize, sweep, thread_budget, Comparison, MeanStd,
    SeedRow, SpeedupReport,
};
pub use train::{
    epochs_to_target, evaluate_model, predict_probs, probe_jaccard, train_run,
    train_run_with_model, EpochRecord, RunHistory, TrainConfig, TrainedRun,
};
