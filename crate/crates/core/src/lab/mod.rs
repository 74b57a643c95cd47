//! Experiment harness: synthetic tasks, configs, a momentum optimizer,
//! training loops, alignment stages, scaling-law fits, and metrics logging.

pub mod align_run;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod scaling;
pub mod tasks;
pub mod train;

pub use align_run::{
    mean_oracle_reward, oracle_win_rate, pairwise_accuracy, run_bon, train_dpo, train_ppo,
    train_reward, RolloutParams,
};
pub use config::{AlignConfig, ExperimentConfig, ObjectiveKind, OptimConfig, TaskKind};
pub use metrics::MetricsLog;
pub use optim::SgdMomentum;
pub use scaling::{chinchilla_eval, fit_power_law, kaplan_param_loss, PowerLawFit, ScalingPoint};
pub use tasks::{
    copy_dataset, eval_copy, eval_passkey, exact_match_rate, memorize_corpus, oracle_reward,
    passkey_dataset, pref_pairs, pref_prompts,
};
pub use train::{build_examples, eval_loss, run_train, train_examples};
