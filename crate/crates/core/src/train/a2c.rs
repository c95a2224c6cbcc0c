//! Actor-critic update with the counterfactual critic.
//!
//! The critic regresses the taken-action value of every agent-step on
//! λ-returns computed along that agent's own chain of steps. The actor is
//! pushed along `log pi(a) * (Q[a] - sum_b pi(b) Q[b])`, differentiating
//! through the whole communication graph and the recurrent state.

use crate::autodiff::{Axis, Tape, Var};
use crate::critic::{
    actor_loss, counterfactual_advantage, critic_loss, pick_actions, Critic, CriticInput,
};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, RmsProp};
use crate::policy::{BoundPolicy, CommPolicy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::rollout::{mix_uniform, unroll, BatchedStep, CommMode, Episode, EpisodeBatch};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorCriticSettings {
    pub gamma: f64,
    pub lambda: f64,
    pub grad_clip: f64,
    pub entropy_coef: f64,
    /// Uniform mixing weight the batch was collected with.
    pub explore: f64,
    /// Critic gradient steps per batch; the last one is shared with the actor step.
    pub critic_passes: usize,
    pub comm: CommMode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: Option<f64>,
    pub critic_loss: f64,
    pub grad_norm: f64,
}

/// One agent at one timestep of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentStep {
    pub env: usize,
    pub t: usize,
    pub slot: usize,
    pub action: usize,
}

/// Agent-steps in unroll order (timestep, then row).
pub fn agent_steps<T>(steps: &[BatchedStep<T>], episodes: &[&Episode]) -> Result<Vec<AgentStep>> {
    let mut out = Vec::new();
    for (t, s) in steps.iter().enumerate() {
        for &(b, slot) in &s.rows {
            let action = episodes[b].transitions[t].actions[slot]
                .ok_or_else(|| Error::Env(format!("active slot {slot} has no action at step {t}")))?;
            out.push(AgentStep {
                env: b,
                t,
                slot,
                action,
            });
        }
    }
    Ok(out)
}

/// Agent-steps straight from the recorded episodes, without a policy unroll.
pub fn recorded_steps(episodes: &[&Episode]) -> Vec<AgentStep> {
    let horizon = episodes.iter().map(|e| e.transitions.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for t in 0..horizon {
        for (env, e) in episodes.iter().enumerate() {
            let Some(tr) = e.transitions.get(t) else { continue };
            for (slot, a) in tr.actions.iter().enumerate() {
                if let Some(action) = *a {
                    out.push(AgentStep { env, t, slot, action });
                }
            }
        }
    }
    out
}

/// Index of the same agent's entry one step later, if its chain continues.
pub fn successors(entries: &[AgentStep], episodes: &[&Episode]) -> Vec<Option<usize>> {
    let mut index = std::collections::HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        index.insert((e.env, e.t, e.slot), i);
    }
    entries
        .iter()
        .map(|e| {
            let next = episodes[e.env].transitions.get(e.t + 1)?;
            if !next.observation.continuing(e.slot) {
                return None;
            }
            index.get(&(e.env, e.t + 1, e.slot)).copied()
        })
        .collect()
}

/// λ-returns for every entry, following each agent's chain of successors.
pub fn chain_targets(
    entries: &[AgentStep],
    next: &[Option<usize>],
    rewards: impl Fn(&AgentStep) -> f64,
    q_taken: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let mut has_pred = vec![false; entries.len()];
    for n in next.iter().flatten() {
        has_pred[*n] = true;
    }
    let mut targets = vec![f64::NAN; entries.len()];
    for start in (0..entries.len()).filter(|&i| !has_pred[i]) {
        let mut chain = vec![start];
        while let Some(n) = next[*chain.last().unwrap()] {
            chain.push(n);
        }
        let r: Vec<f64> = chain.iter().map(|&i| rewards(&entries[i])).collect();
        let nv: Vec<f64> = chain
            .iter()
            .map(|&i| next[i].map_or(0.0, |n| q_taken[n]))
            .collect();
        let g = crate::critic::td_lambda_targets(&r, &nv, gamma, lambda, true)?;
        for (k, &i) in chain.iter().enumerate() {
            targets[i] = g[k];
        }
    }
    Ok(targets)
}

/// Losses of one batch on a tape.
pub struct ActorCriticLosses {
    pub actor: Var,
    pub critic: Var,
    pub total: Var,
}

pub fn build_losses<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &CommPolicy<T>,
    bound: &BoundPolicy,
    critic: &Critic<T>,
    critic_vars: &[Var],
    batch: &EpisodeBatch,
    settings: &ActorCriticSettings,
) -> Result<ActorCriticLosses> {
    let episodes: Vec<&Episode> = batch.episodes.iter().collect();
    let steps = unroll(tape, policy, bound, &episodes, settings.comm)?;
    let entries = agent_steps(&steps, &episodes)?;
    if entries.is_empty() {
        let zero = tape.constant(Tensor::scalar(T::zero()));
        return Ok(ActorCriticLosses {
            actor: zero,
            critic: zero,
            total: zero,
        });
    }

    let (q, critic_term) = critic_regression(tape, critic, critic_vars, &episodes, &entries, settings)?;
    let actions: Vec<usize> = entries.iter().map(|e| e.action).collect();

    let q_all = tape.value(q).clone();
    let mut logp_cols = Vec::new();
    let mut advantages = Vec::with_capacity(entries.len());
    let mut neg_entropy = Vec::new();
    let mut offset = 0;
    for s in &steps {
        let Some(out) = &s.output else { continue };
        let acts = &actions[offset..offset + s.rows.len()];
        let avail = s.available.as_ref().expect("rows have availability");
        let log_probs = mix_uniform(tape, out.log_probs, avail, settings.explore)?;
        logp_cols.push(pick_actions(tape, log_probs, acts)?);
        let dists = CommPolicy::<T>::distributions(tape, log_probs)?;
        for (k, d) in dists.iter().enumerate() {
            let qrow: Vec<f64> = q_all.row(offset + k).iter().map(|v| v.to_f64().unwrap()).collect();
            advantages.push(counterfactual_advantage(&qrow, d.probs(), acts[k])?);
        }
        if settings.entropy_coef > 0.0 {
            let p = tape.exp(log_probs);
            let plogp = tape.mul(p, log_probs)?;
            neg_entropy.push(tape.sum(plogp, None)?);
        }
        offset += s.rows.len();
    }
    let logp = if logp_cols.len() == 1 {
        logp_cols[0]
    } else {
        tape.concat(&logp_cols, Axis::Rows)?
    };
    let normalizer = batch.env_steps().max(1) as f64;
    let mut actor_term = actor_loss(tape, logp, &advantages, normalizer)?;
    if !neg_entropy.is_empty() {
        let cat = tape.concat(&neg_entropy, Axis::Rows)?;
        let total = tape.sum(cat, None)?;
        let scaled = tape.scale(total, T::lit(settings.entropy_coef / normalizer));
        actor_term = tape.add(actor_term, scaled)?;
    }
    let total = tape.add(actor_term, critic_term)?;
    Ok(ActorCriticLosses {
        actor: actor_term,
        critic: critic_term,
        total,
    })
}

/// Q values of every entry and the squared λ-return error of the taken actions.
fn critic_regression<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &Critic<T>,
    critic_vars: &[Var],
    episodes: &[&Episode],
    entries: &[AgentStep],
    settings: &ActorCriticSettings,
) -> Result<(Var, Var)> {
    let inputs: Vec<CriticInput> = entries
        .iter()
        .map(|e| {
            let tr = &episodes[e.env].transitions[e.t];
            CriticInput::for_agent(
                &tr.observation.state,
                &tr.actions,
                e.slot,
                tr.observation.obs_row(e.slot),
            )
        })
        .collect();
    let x = tape.constant(critic.features(&inputs)?);
    let q = critic.forward(tape, critic_vars, x)?;
    let actions: Vec<usize> = entries.iter().map(|e| e.action).collect();
    let q_col = pick_actions(tape, q, &actions)?;
    let q_taken = tape.value(q_col).to_f64_vec();
    let next = successors(entries, episodes);
    let reward = |e: &AgentStep| episodes[e.env].transitions[e.t].reward;
    let targets = chain_targets(entries, &next, reward, &q_taken, settings.gamma, settings.lambda)?;
    Ok((q, critic_loss(tape, q_col, &targets)?))
}

/// Critic-only gradient step on `batch`.
pub fn critic_update<T: Scalar>(
    critic: &mut Critic<T>,
    critic_opt: &mut RmsProp<T>,
    batch: &EpisodeBatch,
    settings: &ActorCriticSettings,
) -> Result<f64> {
    let episodes: Vec<&Episode> = batch.episodes.iter().collect();
    let entries = recorded_steps(&episodes);
    if entries.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let cvars = critic.bind(&mut tape, true);
    let (_, loss) = critic_regression(&mut tape, critic, &cvars, &episodes, &entries, settings)?;
    let value = finite_or_abort("critic loss", tape.value(loss).data()[0].to_f64().unwrap())?;
    let grads = tape.backward(loss)?;
    let mut cg = critic.params.collect_grads(&grads, &cvars);
    finite_or_abort("critic gradient norm", clip_global_norm(&mut cg, settings.grad_clip))?;
    critic_opt.step(&mut critic.params, &cg)?;
    Ok(value)
}

fn finite_or_abort(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// One gradient step on both networks from a freshly collected batch.
pub fn actor_critic_update<T: Scalar>(
    policy: &mut CommPolicy<T>,
    critic: &mut Critic<T>,
    policy_opt: &mut RmsProp<T>,
    critic_opt: &mut RmsProp<T>,
    batch: &EpisodeBatch,
    settings: &ActorCriticSettings,
) -> Result<UpdateStats> {
    batch.validate()?;
    for _ in 1..settings.critic_passes {
        critic_update(critic, critic_opt, batch, settings)?;
    }
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, true);
    let cvars = critic.bind(&mut tape, true);
    let losses = build_losses(&mut tape, policy, &bound, critic, &cvars, batch, settings)?;
    let actor_value = finite_or_abort("actor loss", tape.value(losses.actor).data()[0].to_f64().unwrap())?;
    let critic_value = finite_or_abort("critic loss", tape.value(losses.critic).data()[0].to_f64().unwrap())?;
    let grads = tape.backward(losses.total)?;
    let mut pg = policy.params.collect_grads(&grads, &bound.vars);
    let mut cg = critic.params.collect_grads(&grads, &cvars);
    let pnorm = finite_or_abort("policy gradient norm", clip_global_norm(&mut pg, settings.grad_clip))?;
    finite_or_abort("critic gradient norm", clip_global_norm(&mut cg, settings.grad_clip))?;
    policy_opt.step(&mut policy.params, &pg)?;
    critic_opt.step(&mut critic.params, &cg)?;
    if !policy.params.is_finite() || !critic.params.is_finite() {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    Ok(UpdateStats {
        actor_loss: Some(actor_value),
        critic_loss: critic_value,
        grad_norm: pnorm,
    })
}
