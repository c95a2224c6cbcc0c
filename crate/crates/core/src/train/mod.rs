//! Batched on-policy actor-critic training, the value-based baseline and
//! greedy evaluation.

pub mod a2c;
pub mod config;
pub mod eval;
pub mod iql;
pub mod rollout;
pub mod trainer;

pub use config::{Algorithm, EnvChoice, TrainConfig};
pub use eval::{evaluate, EvalMetrics};
pub use rollout::{
    run_episodes, unroll, CommMode, Decision, Episode, EpisodeBatch, NoObserver, RolloutObserver,
    Selection, Transition,
};
pub use trainer::{MetricsRecord, Trainer};
