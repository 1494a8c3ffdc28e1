//! In-context imitation learning on a toy 2D manipulation suite.
//!
//! A policy sees one full expert demonstration as its prompt, then the live
//! episode's observations, and predicts an action at every query step.

mod dataset;
pub mod env;
mod eval;
mod policy;
mod train;

pub use dataset::{
    by_task, expert_episode, from_action_episodes, generate_expert_dataset, read_dataset,
    to_action_episodes, write_dataset, Episode,
};
pub use env::{sample_state, scripted_expert, TaskFamily, ToyEnvState};
pub use eval::{
    evaluate_tokenizer_suite, policy_tokenizer_config, prompt_pool, rollout_in_context, run_cell,
    run_parallel, spearman, success_rate, CellResult, Rollout, SuiteOptions, SuiteReport, SuiteRow,
    Variant,
};
pub use policy::{
    build_sequence, prompted_sequence, sinusoidal_positions, CausalPolicy, DecodeVia,
    EpisodeSequence, PolicyConfig, PolicyForward, TokenType,
};
pub use train::{ema, train_policy, PolicyTrainOptions, PolicyTrainReport};
