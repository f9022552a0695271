//! Few-shot splits, training, metrics, multi-seed runs, ablations and score
//! maps.

pub mod heatmap;
pub mod metrics;
pub mod runner;
pub mod split;
pub mod train;

pub use heatmap::emit_score_map;
pub use metrics::{accuracy, binary_auc, evaluate_logits, macro_auc, macro_f1, mean_std, Metrics};
pub use runner::{
    dataset_digest, run_ablation, run_seeds, split_digest, sweep_shots, Experiment, RunOptions, RunReport,
    SeedResult, Variant, CSV_HEADER,
};
pub use split::few_shot_split;
pub use train::{train, TrainOptions, TrainReport};
