//! Multi-agent environments with a shared Dec-POMDP interface.
//!
//! Agents live in fixed slots. An inactive slot has a zero observation, an
//! isolated node in the adjacency mask and must receive no action.

pub mod manufacture;
pub mod routes;
pub mod traffic;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::AdjacencyMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub horizon: usize,
}

/// What the agents and the critic see after a reset or step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `n_agents x obs_dim`, row-major.
    pub obs: Vec<f64>,
    pub obs_dim: usize,
    pub state: Vec<f64>,
    pub active: Vec<bool>,
    /// Slot was (re)occupied by a new agent this step; its recurrent state restarts.
    pub fresh: Vec<bool>,
    /// `n_agents x n_actions` availability flags.
    pub available: Vec<bool>,
    pub n_actions: usize,
    pub adjacency: AdjacencyMask,
}

impl Observation {
    pub fn n_agents(&self) -> usize {
        self.active.len()
    }

    pub fn obs_row(&self, slot: usize) -> &[f64] {
        &self.obs[slot * self.obs_dim..(slot + 1) * self.obs_dim]
    }

    pub fn available_row(&self, slot: usize) -> &[bool] {
        &self.available[slot * self.n_actions..(slot + 1) * self.n_actions]
    }

    pub fn active_slots(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    /// Whether a slot's agent carries its recurrent state over from the last step.
    pub fn continuing(&self, slot: usize) -> bool {
        self.active[slot] && !self.fresh[slot]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collisions: usize,
    pub products: usize,
    pub success: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub trait MultiAgentEnv {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode. `training_step` lets curriculum-driven
    /// environments pick their difficulty.
    fn reset_episode(&mut self, seed: u64, training_step: u64) -> Result<Observation>;

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome>;

    fn observation(&self) -> Observation;

    /// Episode-level success flag, for environments that define one.
    fn episode_success(&self) -> Option<bool> {
        None
    }

    /// JSON record describing the most recent step.
    fn trace_record(&self) -> Option<serde_json::Value>;

    /// Grid cell `(row, col)` of the agent in `slot`, for spatial analyses.
    fn agent_cell(&self, _slot: usize) -> Option<(usize, usize)> {
        None
    }

    fn grid_dims(&self) -> Option<(usize, usize)> {
        None
    }
}

pub(crate) fn check_actions(
    actions: &[Option<usize>],
    active: &[bool],
    n_actions: usize,
) -> Result<()> {
    use crate::error::Error;
    if actions.len() != active.len() {
        return Err(Error::Env(format!(
            "expected {} action slots, got {}",
            active.len(),
            actions.len()
        )));
    }
    for (slot, (a, &on)) in actions.iter().zip(active).enumerate() {
        match (a, on) {
            (Some(_), false) => {
                return Err(Error::Env(format!("action given for inactive slot {slot}")))
            }
            (None, true) => return Err(Error::Env(format!("missing action for active slot {slot}"))),
            (Some(a), true) if *a >= n_actions => {
                return Err(Error::Env(format!("action {a} out of range in slot {slot}")))
            }
            _ => {}
        }
    }
    Ok(())
}
