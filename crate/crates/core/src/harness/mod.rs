//! Experiment harness: fields, episodes, baselines and metrics.

pub mod baselines;
pub mod episode;
pub mod field;
pub mod metrics;

pub use baselines::{greedy_action, GreedyKind, GreedyParams};
pub use episode::{run_episode, start_index, EpisodeConfig, EpisodeResult, PolicyKind, StartRule, StepRecord};
pub use field::{load_field_csv, FieldGrid};
pub use metrics::{aggregate, mean_se, paired_one_sided_t_test, PairedTest, StepSummary};
