//! Lockstep episodes over several environments with one batched policy pass
//! per timestep.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Axis, Tape, Var};
use crate::env::{MultiAgentEnv, Observation};
use crate::error::{Error, Result};
use crate::policy::{argmax, ActionDistribution, AdjacencyMask, BoundPolicy, CommPolicy, StepOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How agents pick actions from the network output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Sample,
    /// Sample from the policy mixed with a uniform distribution over available
    /// actions: `(1 - eps) * pi + eps / n_available`.
    Explore(f64),
    Greedy,
    /// Uniform over available actions with this probability, greedy otherwise.
    EpsilonGreedy(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Observation the actions were chosen from.
    pub observation: Observation,
    pub actions: Vec<Option<usize>>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub success: Option<bool>,
}

impl Episode {
    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// One trajectory per parallel environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
}

impl EpisodeBatch {
    pub fn env_steps(&self) -> u64 {
        self.episodes.iter().map(|e| e.len() as u64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (b, e) in self.episodes.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::Env(format!("episode {b} is empty")));
            }
            if let Some(t) = e.transitions.iter().position(|t| !t.reward.is_finite()) {
                return Err(Error::Numerical(format!("episode {b} reward at step {t} is not finite")));
            }
        }
        Ok(())
    }
}

/// Per-decision details handed to a [`RolloutObserver`].
#[derive(Clone, Debug, Serialize)]
pub struct Decision {
    pub env: usize,
    pub t: usize,
    pub slot: usize,
    pub cell: Option<(usize, usize)>,
    pub action: usize,
    /// L2 norm of the agent's last convolution output.
    pub message_norm: f64,
}

pub trait RolloutObserver {
    fn on_decision(&mut self, _decision: &Decision) {}

    /// Called after every environment step with the env's trace record.
    fn on_step(&mut self, _env: usize, _episode_seed: u64, _record: &serde_json::Value) {}

    fn wants_traces(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl RolloutObserver for NoObserver {}

/// Whether agents exchange messages along the observed graph or only attend
/// to themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommMode {
    Graph,
    Isolated,
}

/// Policy output for the agents active at one timestep across all envs.
pub struct BatchedStep<T> {
    /// `(env, slot)` per output row.
    pub rows: Vec<(usize, usize)>,
    pub output: Option<StepOutput>,
    /// Availability flags of the rows, `rows x n_actions`.
    pub available: Option<Tensor<T>>,
}

/// Log-probabilities of the uniform-mixed policy `(1 - eps) * pi + eps / n`,
/// with `n` the number of available actions of each row. Unavailable
/// actions keep probability zero.
pub fn mix_uniform<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    available: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    if eps == 0.0 {
        return Ok(log_probs);
    }
    let (m, a) = available.shape2()?;
    let mut uniform = vec![T::zero(); m * a];
    let mut pad = vec![T::zero(); m * a];
    let mut fill = vec![T::zero(); m * a];
    for i in 0..m {
        let row = available.row(i);
        let n = row.iter().filter(|&&v| v > T::zero()).count().max(1);
        for k in 0..a {
            if row[k] > T::zero() {
                uniform[i * a + k] = T::lit(eps / n as f64);
            } else {
                pad[i * a + k] = T::one();
                fill[i * a + k] = T::lit(crate::autodiff::MASK_FILL);
            }
        }
    }
    let p = tape.exp(log_probs);
    let p = tape.scale(p, T::lit(1.0 - eps));
    let shift = tape.constant(Tensor::matrix(m, a, uniform)?);
    let pad = tape.constant(Tensor::matrix(m, a, pad)?);
    let fill = tape.constant(Tensor::matrix(m, a, fill)?);
    let mixed = tape.add(p, shift)?;
    let mixed = tape.add(mixed, pad)?;
    let logp = tape.log(mixed);
    tape.add(logp, fill)
}

/// Runs the policy on every active agent of `observations` at once.
///
/// `prev` carries the previous step's rows and hidden state so agents that
/// continue keep their recurrent memory; new or reappearing agents start
/// from zeros.
pub fn batched_step<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &CommPolicy<T>,
    bound: &BoundPolicy,
    observations: &[Option<&Observation>],
    prev: Option<(&[(usize, usize)], Var)>,
    comm: CommMode,
) -> Result<BatchedStep<T>> {
    let mut rows = Vec::new();
    let mut slots_per_env = Vec::with_capacity(observations.len());
    for (b, o) in observations.iter().enumerate() {
        let slots = o.map(Observation::active_slots).unwrap_or_default();
        rows.extend(slots.iter().map(|&s| (b, s)));
        slots_per_env.push(slots);
    }
    if rows.is_empty() {
        return Ok(BatchedStep {
            rows,
            output: None,
            available: None,
        });
    }
    let cfg = &policy.config;
    let mut obs = Vec::with_capacity(rows.len() * cfg.obs_dim);
    let mut avail = Vec::with_capacity(rows.len() * cfg.n_actions);
    for &(b, s) in &rows {
        let o = observations[b].unwrap();
        obs.extend(o.obs_row(s).iter().map(|&v| T::lit(v)));
        avail.extend(o.available_row(s).iter().map(|&a| if a { T::one() } else { T::zero() }));
    }
    let obs = tape.constant(Tensor::matrix(rows.len(), cfg.obs_dim, obs)?);
    let available = Tensor::matrix(rows.len(), cfg.n_actions, avail)?;

    let isolated: Vec<AdjacencyMask> = match comm {
        CommMode::Isolated => observations
            .iter()
            .map(|o| AdjacencyMask::identity(o.map_or(1, Observation::n_agents)))
            .collect(),
        CommMode::Graph => Vec::new(),
    };
    let blocks: Vec<(&AdjacencyMask, &[usize])> = observations
        .iter()
        .enumerate()
        .filter_map(|(b, o)| {
            let o = (*o)?;
            let mask = match comm {
                CommMode::Graph => &o.adjacency,
                CommMode::Isolated => &isolated[b],
            };
            Some((mask, slots_per_env[b].as_slice()))
        })
        .collect();
    let mask = AdjacencyMask::block_diagonal::<T>(&blocks);

    let h_prev = match prev {
        Some((prev_rows, prev_hidden)) => {
            let zero_row = prev_rows.len();
            let idx: Vec<usize> = rows
                .iter()
                .map(|&(b, s)| {
                    let carried = observations[b].is_some_and(|o| o.continuing(s));
                    if carried {
                        prev_rows.iter().position(|&r| r == (b, s)).unwrap_or(zero_row)
                    } else {
                        zero_row
                    }
                })
                .collect();
            if idx.iter().all(|&i| i == zero_row) {
                policy.zero_hidden(tape, rows.len())
            } else {
                let zero = policy.zero_hidden(tape, 1);
                let padded = tape.concat(&[prev_hidden, zero], Axis::Rows)?;
                tape.gather_rows(padded, &idx)?
            }
        }
        None => policy.zero_hidden(tape, rows.len()),
    };
    let output = policy.step(tape, bound, obs, &mask, h_prev, &available)?;
    Ok(BatchedStep {
        rows,
        output: Some(output),
        available: Some(available),
    })
}

/// Chooses an action per output row.
pub fn select_actions<T: Scalar, R: Rng + ?Sized>(
    tape: &Tape<T>,
    out: &StepOutput,
    available: &[bool],
    selection: Selection,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let lp = tape.value(out.log_probs);
    let (m, a) = lp.shape2()?;
    let dists = CommPolicy::<T>::distributions(tape, out.log_probs)?;
    if available.len() != m * a {
        return Err(Error::Shape {
            op: "select_actions",
            lhs: vec![m, a],
            rhs: vec![available.len()],
        });
    }
    (0..m)
        .map(|i| {
            let probs = dists[i].probs();
            let avail_row = &available[i * a..(i + 1) * a];
            Ok(match selection {
                Selection::Sample => dists[i].sample(rng),
                Selection::Explore(eps) => {
                    let n = avail_row.iter().filter(|&&v| v).count().max(1) as f64;
                    let mixed: Vec<f64> = (0..a)
                        .map(|k| {
                            if avail_row[k] {
                                (1.0 - eps) * probs[k] + eps / n
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let total: f64 = mixed.iter().sum();
                    ActionDistribution::new(mixed.iter().map(|p| p / total).collect())?.sample(rng)
                }
                Selection::Greedy => argmax(probs),
                Selection::EpsilonGreedy(eps) => {
                    if rng.random::<f64>() < eps {
                        let avail: Vec<usize> = (0..a).filter(|&k| avail_row[k]).collect();
                        avail[rng.random_range(0..avail.len())]
                    } else {
                        let logits = tape.value(out.logits).row(i);
                        let masked: Vec<f64> = (0..a)
                            .map(|k| {
                                if avail_row[k] {
                                    logits[k].to_f64().unwrap()
                                } else {
                                    f64::NEG_INFINITY
                                }
                            })
                            .collect();
                        argmax(&masked)
                    }
                }
            })
        })
        .collect()
}

/// Plays one episode in each environment, all in lockstep.
///
/// Each environment is reset with the matching entry of `seeds`; episodes
/// end when their environment reports `done`.
#[allow(clippy::too_many_arguments)]
pub fn run_episodes<T: Scalar, R: Rng + ?Sized>(
    policy: &CommPolicy<T>,
    envs: &mut [Box<dyn MultiAgentEnv + Send>],
    seeds: &[u64],
    training_step: u64,
    selection: Selection,
    comm: CommMode,
    rng: &mut R,
    observer: &mut dyn RolloutObserver,
) -> Result<EpisodeBatch> {
    if seeds.len() != envs.len() {
        return Err(Error::Config(format!(
            "{} seeds for {} environments",
            seeds.len(),
            envs.len()
        )));
    }
    let mut current: Vec<Option<Observation>> = Vec::with_capacity(envs.len());
    for (env, &seed) in envs.iter_mut().zip(seeds) {
        current.push(Some(env.reset_episode(seed, training_step)?));
    }
    let mut episodes: Vec<Episode> = seeds
        .iter()
        .map(|&seed| Episode {
            seed,
            transitions: Vec::new(),
            success: None,
        })
        .collect();

    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, false);
    let mut prev: Option<(Vec<(usize, usize)>, Var)> = None;
    let mut t = 0;
    while current.iter().any(Option::is_some) {
        let views: Vec<Option<&Observation>> = current.iter().map(Option::as_ref).collect();
        let step = batched_step(
            &mut tape,
            policy,
            &bound,
            &views,
            prev.as_ref().map(|(r, h)| (r.as_slice(), *h)),
            comm,
        )?;
        let available: Vec<bool> = step
            .rows
            .iter()
            .flat_map(|&(b, s)| views[b].unwrap().available_row(s).iter().copied())
            .collect();
        let chosen = match &step.output {
            Some(out) => select_actions(&tape, out, &available, selection, rng)?,
            None => Vec::new(),
        };
        let mut joint: Vec<Vec<Option<usize>>> = current
            .iter()
            .map(|o| vec![None; o.as_ref().map_or(0, Observation::n_agents)])
            .collect();
        for (k, &(b, s)) in step.rows.iter().enumerate() {
            joint[b][s] = Some(chosen[k]);
        }
        if let Some(out) = &step.output {
            let messages = tape.value(out.messages);
            for (k, &(b, s)) in step.rows.iter().enumerate() {
                let norm = messages
                    .row(k)
                    .iter()
                    .map(|v| v.to_f64().unwrap().powi(2))
                    .sum::<f64>()
                    .sqrt();
                observer.on_decision(&Decision {
                    env: b,
                    t,
                    slot: s,
                    cell: envs[b].agent_cell(s),
                    action: chosen[k],
                    message_norm: norm,
                });
            }
        }

        for b in 0..envs.len() {
            let Some(obs) = current[b].take() else {
                continue;
            };
            let outcome = envs[b]
                .step(&joint[b])
                .map_err(|e| Error::Env(format!("environment {b}, step {t}: {e}")))?;
            if observer.wants_traces() {
                if let Some(rec) = envs[b].trace_record() {
                    observer.on_step(b, episodes[b].seed, &rec);
                }
            }
            episodes[b].transitions.push(Transition {
                observation: obs,
                actions: std::mem::take(&mut joint[b]),
                reward: outcome.reward,
            });
            if outcome.done {
                episodes[b].success = envs[b].episode_success();
            } else {
                current[b] = Some(outcome.observation);
            }
        }
        prev = step.output.map(|o| (step.rows, o.hidden));
        t += 1;
    }
    Ok(EpisodeBatch { episodes })
}

/// Differentiable replay of recorded episodes; one [`BatchedStep`] per timestep.
///
/// Runs exactly the computation the rollout ran, so with unchanged
/// parameters the log-probabilities match the ones actions were sampled from.
pub fn unroll<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &CommPolicy<T>,
    bound: &BoundPolicy,
    episodes: &[&Episode],
    comm: CommMode,
) -> Result<Vec<BatchedStep<T>>> {
    let horizon = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
    let mut steps: Vec<BatchedStep<T>> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let views: Vec<Option<&Observation>> = episodes
            .iter()
            .map(|e| e.transitions.get(t).map(|tr| &tr.observation))
            .collect();
        let prev = steps
            .last()
            .and_then(|s| s.output.as_ref().map(|o| (s.rows.as_slice(), o.hidden)));
        let step = batched_step(tape, policy, bound, &views, prev, comm)?;
        steps.push(step);
    }
    Ok(steps)
}
