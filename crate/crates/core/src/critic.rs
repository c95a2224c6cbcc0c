//! Centralized counterfactual critic.
//!
//! For agent `n` the critic sees the true state, the one-hot actions of every
//! other agent, a one-hot id and the agent's own observation, and outputs one
//! Q value per candidate action of `n`. Holding the other actions fixed, the
//! policy-weighted mean of that vector is a baseline that does not bias the
//! policy gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub hidden_dim: usize,
}

impl CriticConfig {
    pub fn input_dim(&self) -> usize {
        self.state_dim + (self.n_agents - 1) * self.n_actions + self.n_agents + self.obs_dim
    }
}

/// Everything the critic conditions on for one agent at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticInput<'a> {
    pub state: &'a [f64],
    /// Actions of the other `N-1` agents in slot order; `None` for empty slots.
    pub other_actions: Vec<Option<usize>>,
    pub agent: usize,
    pub obs: &'a [f64],
}

impl CriticInput<'_> {
    /// Builds the input for `agent` from the full joint action.
    pub fn for_agent<'a>(
        state: &'a [f64],
        joint: &[Option<usize>],
        agent: usize,
        obs: &'a [f64],
    ) -> CriticInput<'a> {
        let other_actions = joint
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != agent)
            .map(|(_, &a)| a)
            .collect();
        CriticInput {
            state,
            other_actions,
            agent,
            obs,
        }
    }

    pub fn write_features<T: Scalar>(&self, cfg: &CriticConfig, out: &mut Vec<T>) -> Result<()> {
        if self.state.len() != cfg.state_dim
            || self.obs.len() != cfg.obs_dim
            || self.other_actions.len() + 1 != cfg.n_agents
            || self.agent >= cfg.n_agents
        {
            return Err(Error::Shape {
                op: "critic_input",
                lhs: vec![
                    self.state.len(),
                    self.other_actions.len() + 1,
                    self.agent,
                    self.obs.len(),
                ],
                rhs: vec![cfg.state_dim, cfg.n_agents, cfg.n_agents, cfg.obs_dim],
            });
        }
        out.extend(self.state.iter().map(|&v| T::lit(v)));
        for a in &self.other_actions {
            let start = out.len();
            out.resize(start + cfg.n_actions, T::zero());
            if let Some(a) = *a {
                if a >= cfg.n_actions {
                    return Err(Error::Shape {
                        op: "critic_input action",
                        lhs: vec![a],
                        rhs: vec![cfg.n_actions],
                    });
                }
                out[start + a] = T::one();
            }
        }
        let start = out.len();
        out.resize(start + cfg.n_agents, T::zero());
        out[start + self.agent] = T::one();
        out.extend(self.obs.iter().map(|&v| T::lit(v)));
        Ok(())
    }
}

/// Feed-forward critic: two ReLU hidden layers, one output per action.
#[derive(Clone, Debug)]
pub struct Critic<T> {
    pub config: CriticConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        if config.n_agents == 0 || config.n_actions == 0 || config.hidden_dim == 0 {
            return Err(Error::Config(format!("critic dims must be positive: {config:?}")));
        }
        let (i, h, a) = (config.input_dim(), config.hidden_dim, config.n_actions);
        let mut params = ParamSet::new();
        params.push("fc1.w", Tensor::glorot(rng, i, h));
        params.push("fc1.b", Tensor::zeros(&[h]));
        params.push("fc2.w", Tensor::glorot(rng, h, h));
        params.push("fc2.b", Tensor::zeros(&[h]));
        params.push("out.w", Tensor::glorot(rng, h, a));
        params.push("out.b", Tensor::zeros(&[a]));
        Ok(Critic { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    pub fn features(&self, inputs: &[CriticInput<'_>]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(inputs.len() * self.config.input_dim());
        for input in inputs {
            input.write_features(&self.config, &mut data)?;
        }
        Tensor::matrix(inputs.len(), self.config.input_dim(), data)
    }

    /// Q values, `rows x n_actions`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let (_, d) = tape.value(x).shape2()?;
        if d != self.config.input_dim() {
            return Err(Error::Shape {
                op: "critic_forward",
                lhs: vec![d],
                rhs: vec![self.config.input_dim()],
            });
        }
        let z = tape.matmul(x, p[0])?;
        let z = tape.add_bias(z, p[1])?;
        let z = tape.relu(z);
        let z = tape.matmul(z, p[2])?;
        let z = tape.add_bias(z, p[3])?;
        let z = tape.relu(z);
        let z = tape.matmul(z, p[4])?;
        tape.add_bias(z, p[5])
    }

    /// Convenience evaluation without keeping a tape around.
    pub fn q_values(&self, inputs: &[CriticInput<'_>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(self.features(inputs)?);
        let q = self.forward(&mut tape, &p, x)?;
        let q = tape.value(q);
        Ok((0..inputs.len())
            .map(|i| q.row(i).iter().map(|v| v.to_f64().unwrap()).collect())
            .collect())
    }
}

/// `Q[a] - sum_b pi[b] Q[b]`.
pub fn counterfactual_advantage(q: &[f64], pi: &[f64], chosen: usize) -> Result<f64> {
    if q.len() != pi.len() || chosen >= q.len() {
        return Err(Error::Shape {
            op: "counterfactual_advantage",
            lhs: vec![q.len(), chosen],
            rhs: vec![pi.len()],
        });
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-5 || pi.iter().any(|p| *p < 0.0) {
        return Err(Error::Distribution(format!(
            "policy for baseline sums to {total}"
        )));
    }
    // Same as q[chosen] - sum(pi * q) for a normalized policy, but exact
    // under a constant shift of q.
    let own = q[chosen];
    Ok(q.iter().zip(pi).map(|(v, p)| p * (own - v)).sum())
}

/// λ-returns by the backward recursion
/// `G_t = r_t + γ((1-λ) Q_{t+1} + λ G_{t+1})`.
///
/// `rewards[t]` is the reward received after acting at `t`, and
/// `next_values[t]` the critic value of the following state-action pair.
/// A terminal sequence bootstraps with zero after its last reward; a
/// truncated one bootstraps with the last `next_values` entry.
pub fn td_lambda_targets(
    rewards: &[f64],
    next_values: &[f64],
    gamma: f64,
    lambda: f64,
    terminal: bool,
) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidTensor("td_lambda_targets: empty sequence".into()));
    }
    if next_values.len() != rewards.len() {
        return Err(Error::Shape {
            op: "td_lambda_targets",
            lhs: vec![rewards.len()],
            rhs: vec![next_values.len()],
        });
    }
    let n = rewards.len();
    let mut targets = vec![0.0; n];
    let last_bootstrap = if terminal { 0.0 } else { next_values[n - 1] };
    let mut ret = rewards[n - 1] + gamma * last_bootstrap;
    targets[n - 1] = ret;
    for t in (0..n - 1).rev() {
        ret = rewards[t] + gamma * ((1.0 - lambda) * next_values[t] + lambda * ret);
        targets[t] = ret;
    }
    Ok(targets)
}

/// Mean squared TD error over the column `q_taken` (`rows x 1`).
pub fn critic_loss<T: Scalar>(tape: &mut Tape<T>, q_taken: Var, targets: &[f64]) -> Result<Var> {
    let (rows, cols) = tape.value(q_taken).shape2()?;
    if cols != 1 || rows != targets.len() {
        return Err(Error::Shape {
            op: "critic_loss",
            lhs: vec![rows, cols],
            rhs: vec![targets.len(), 1],
        });
    }
    let y = tape.constant(Tensor::matrix(
        rows,
        1,
        targets.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let diff = tape.sub(q_taken, y)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq, None)
}

/// `-(1/normalizer) * sum_i logp_i * A_i` with the advantages held constant.
pub fn actor_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_prob_taken: Var,
    advantages: &[f64],
    normalizer: f64,
) -> Result<Var> {
    if let Some(i) = advantages.iter().position(|a| !a.is_finite()) {
        return Err(Error::Numerical(format!(
            "advantage {i} is {}",
            advantages[i]
        )));
    }
    let (rows, cols) = tape.value(log_prob_taken).shape2()?;
    if cols != 1 || rows != advantages.len() {
        return Err(Error::Shape {
            op: "actor_loss",
            lhs: vec![rows, cols],
            rhs: vec![advantages.len(), 1],
        });
    }
    let adv = tape.constant(Tensor::matrix(
        rows,
        1,
        advantages.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let weighted = tape.mul(log_prob_taken, adv)?;
    let total = tape.sum(weighted, None)?;
    Ok(tape.scale(total, T::lit(-1.0 / normalizer)))
}

/// Picks `values[i, actions[i]]` into a `rows x 1` column.
pub fn pick_actions<T: Scalar>(tape: &mut Tape<T>, values: Var, actions: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.value(values).shape2()?;
    if rows != actions.len() || actions.iter().any(|&a| a >= cols) {
        return Err(Error::Shape {
            op: "pick_actions",
            lhs: vec![rows, cols],
            rhs: vec![actions.len()],
        });
    }
    let mut onehot = vec![T::zero(); rows * cols];
    for (i, &a) in actions.iter().enumerate() {
        onehot[i * cols + a] = T::one();
    }
    let mask = tape.constant(Tensor::matrix(rows, cols, onehot)?);
    let picked = tape.mul(values, mask)?;
    tape.sum(picked, Some(Axis::Cols))
}
