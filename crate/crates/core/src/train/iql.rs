//! Independent Q-learning on top of the communicating network.
//!
//! The policy head's raw outputs are read as per-agent action values and
//! regressed on one-step targets `r + gamma * max_b Q'(next, b)` from a
//! periodically synchronized target copy. Whole episodes are replayed so the
//! recurrent state can be rebuilt.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{Axis, Tape, Var};
use crate::critic::pick_actions;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, RmsProp};
use crate::policy::{BoundPolicy, CommPolicy};
use crate::scalar::Scalar;

use super::a2c::{agent_steps, successors, UpdateStats};
use super::rollout::{unroll, CommMode, Episode};

/// First-in first-out store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayStore {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayStore {
    pub fn new(capacity: usize) -> Self {
        ReplayStore {
            capacity: capacity.max(1),
            episodes: VecDeque::new(),
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// `n` episodes drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<&Episode>> {
        if self.episodes.is_empty() {
            return Err(Error::Config("replay store is empty".into()));
        }
        Ok((0..n)
            .map(|_| &self.episodes[rng.random_range(0..self.episodes.len())])
            .collect())
    }
}

/// Action values of every active agent at every step, without gradients.
fn value_rows<T: Scalar>(
    policy: &CommPolicy<T>,
    episodes: &[&Episode],
    comm: CommMode,
) -> Result<std::collections::HashMap<(usize, usize, usize), Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, false);
    let steps = unroll(&mut tape, policy, &bound, episodes, comm)?;
    let mut out = std::collections::HashMap::new();
    for (t, s) in steps.iter().enumerate() {
        let Some(o) = &s.output else { continue };
        let q = tape.value(o.logits);
        for (k, &(b, slot)) in s.rows.iter().enumerate() {
            out.insert((b, t, slot), q.row(k).iter().map(|v| v.to_f64().unwrap()).collect());
        }
    }
    Ok(out)
}

/// One-step targets; an agent whose chain ends bootstraps with zero.
pub fn one_step_targets<T: Scalar>(
    target: &CommPolicy<T>,
    episodes: &[&Episode],
    entries: &[super::a2c::AgentStep],
    gamma: f64,
    comm: CommMode,
) -> Result<Vec<f64>> {
    let next_q = value_rows(target, episodes, comm)?;
    let next = successors(entries, episodes);
    Ok(entries
        .iter()
        .zip(&next)
        .map(|(e, n)| {
            let r = episodes[e.env].transitions[e.t].reward;
            match n {
                None => r,
                Some(_) => {
                    let obs = &episodes[e.env].transitions[e.t + 1].observation;
                    let avail = obs.available_row(e.slot);
                    let q = &next_q[&(e.env, e.t + 1, e.slot)];
                    let best = q
                        .iter()
                        .zip(avail)
                        .filter(|(_, &a)| a)
                        .map(|(v, _)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    r + gamma * best
                }
            }
        })
        .collect())
}

/// Mean squared one-step TD error on a tape.
pub fn q_learning_loss<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &CommPolicy<T>,
    bound: &BoundPolicy,
    target: &CommPolicy<T>,
    episodes: &[&Episode],
    gamma: f64,
    comm: CommMode,
) -> Result<Option<Var>> {
    let steps = unroll(tape, policy, bound, episodes, comm)?;
    let entries = agent_steps(&steps, episodes)?;
    if entries.is_empty() {
        return Ok(None);
    }
    let targets = one_step_targets(target, episodes, &entries, gamma, comm)?;
    let mut cols = Vec::new();
    let mut offset = 0;
    for s in &steps {
        let Some(out) = &s.output else { continue };
        let acts: Vec<usize> = entries[offset..offset + s.rows.len()].iter().map(|e| e.action).collect();
        cols.push(pick_actions(tape, out.logits, &acts)?);
        offset += s.rows.len();
    }
    let q = if cols.len() == 1 {
        cols[0]
    } else {
        tape.concat(&cols, Axis::Rows)?
    };
    Ok(Some(crate::critic::critic_loss(tape, q, &targets)?))
}

pub fn q_learning_update<T: Scalar>(
    policy: &mut CommPolicy<T>,
    target: &CommPolicy<T>,
    opt: &mut RmsProp<T>,
    episodes: &[&Episode],
    gamma: f64,
    grad_clip: f64,
    comm: CommMode,
) -> Result<UpdateStats> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, true);
    let Some(loss) = q_learning_loss(&mut tape, policy, &bound, target, episodes, gamma, comm)? else {
        return Ok(UpdateStats::default());
    };
    let value = tape.value(loss).data()[0].to_f64().unwrap();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("TD loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let mut g = policy.params.collect_grads(&grads, &bound.vars);
    let norm = clip_global_norm(&mut g, grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("gradient norm is {norm}")));
    }
    opt.step(&mut policy.params, &g)?;
    if !policy.params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(UpdateStats {
        actor_loss: None,
        critic_loss: value,
        grad_norm: norm,
    })
}
