use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::MultiAgentEnv;
use crate::error::Result;
use crate::policy::CommPolicy;
use crate::scalar::Scalar;

use super::config::EnvChoice;
use super::rollout::{run_episodes, CommMode, Episode, RolloutObserver, Selection};

/// Environments stepped together during evaluation.
pub const EVAL_LOCKSTEP: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    /// Fraction of successful episodes, for environments that define success.
    pub success_rate: Option<f64>,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

impl EvalMetrics {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let returns: Vec<f64> = episodes.iter().map(Episode::total_return).collect();
        let flags: Vec<bool> = episodes.iter().filter_map(|e| e.success).collect();
        let success_rate = (!flags.is_empty() && flags.len() == episodes.len())
            .then(|| flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64);
        let mean_return = if returns.is_empty() {
            0.0
        } else {
            returns.iter().sum::<f64>() / returns.len() as f64
        };
        EvalMetrics {
            episodes: episodes.len(),
            success_rate,
            mean_return,
            returns,
        }
    }
}

/// Episode seeds for evaluation; the same for every algorithm given `base`.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x5eed_e7a1_0000_0000);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Plays `n` episodes with the given action selection and reports metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    policy: &CommPolicy<T>,
    env: &EnvChoice,
    n: usize,
    seed_base: u64,
    training_step: u64,
    selection: super::rollout::Selection,
    comm: CommMode,
    observer: &mut dyn RolloutObserver,
) -> Result<(EvalMetrics, Vec<Episode>)> {
    let seeds = eval_seeds(seed_base, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
    let mut all = Vec::with_capacity(n);
    let mut envs: Vec<Box<dyn MultiAgentEnv + Send>> = Vec::new();
    for chunk in seeds.chunks(EVAL_LOCKSTEP) {
        while envs.len() < chunk.len() {
            envs.push(env.build()?);
        }
        let batch = run_episodes(
            policy,
            &mut envs[..chunk.len()],
            chunk,
            training_step,
            selection,
            comm,
            &mut rng,
            observer,
        )?;
        all.extend(batch.episodes);
    }
    Ok((EvalMetrics::from_episodes(&all), all))
}

/// Greedy evaluation, as used during training.
pub fn evaluate_greedy<T: Scalar>(
    policy: &CommPolicy<T>,
    env: &EnvChoice,
    n: usize,
    seed_base: u64,
    training_step: u64,
    comm: CommMode,
) -> Result<EvalMetrics> {
    let mut quiet = super::rollout::NoObserver;
    evaluate(policy, env, n, seed_base, training_step, Selection::Greedy, comm, &mut quiet)
        .map(|(m, _)| m)
}
