use serde::{Deserialize, Serialize};

use crate::critic::CriticConfig;
use crate::env::manufacture::{ManufactureConfig, ManufacturingLine};
use crate::env::traffic::{TrafficConfig, TrafficJunction, TrafficMode};
use crate::env::{EnvSpec, MultiAgentEnv};
use crate::error::{Error, Result};
use crate::optim::RmsPropConfig;
use crate::policy::{PolicyConfig, Readout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Communicating actor with the counterfactual critic.
    #[serde(rename = "CCOMA")]
    Ccoma,
    /// Counterfactual critic, agents attend only to themselves.
    #[serde(rename = "COMA")]
    Coma,
    /// Communicating network read as independent Q functions.
    #[serde(rename = "IQL_COMM")]
    IqlComm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Ccoma, Algorithm::Coma, Algorithm::IqlComm];

    pub fn communicates(self) -> bool {
        self != Algorithm::Coma
    }

    pub fn uses_critic(self) -> bool {
        self != Algorithm::IqlComm
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ccoma => "CCOMA",
            Algorithm::Coma => "COMA",
            Algorithm::IqlComm => "IQL_COMM",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CCOMA" => Ok(Algorithm::Ccoma),
            "COMA" => Ok(Algorithm::Coma),
            "IQL_COMM" | "IQL" => Ok(Algorithm::IqlComm),
            _ => Err(Error::Config(format!("unknown algorithm {s}"))),
        }
    }
}

/// Which environment to train on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvChoice {
    Traffic(TrafficConfig),
    Manufacture(ManufactureConfig),
}

impl EnvChoice {
    pub fn build(&self) -> Result<Box<dyn MultiAgentEnv + Send>> {
        Ok(match self {
            EnvChoice::Traffic(c) => Box::new(TrafficJunction::new(c.clone())?),
            EnvChoice::Manufacture(c) => Box::new(ManufacturingLine::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvChoice::Traffic(_) => "traffic",
            EnvChoice::Manufacture(_) => "manufacture",
        }
    }

    pub fn mode(&self) -> String {
        match self {
            EnvChoice::Traffic(c) => c.mode.to_string(),
            EnvChoice::Manufacture(_) => "default".into(),
        }
    }

    pub fn traffic(mode: TrafficMode) -> Self {
        EnvChoice::Traffic(TrafficConfig::for_mode(mode))
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        Ok(self.build()?.spec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algorithm,
    pub seed: u64,
    /// Environment steps summed over the parallel environments.
    pub total_steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub optimizer: RmsPropConfig,
    pub grad_clip: f64,
    pub entropy_coef: f64,
    /// Steps over which the entropy weight decays linearly to zero; 0 keeps it constant.
    pub entropy_anneal_steps: u64,
    /// Uniform mixing of the sampling policy, annealed linearly.
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_anneal_steps: u64,
    pub critic_passes: usize,

    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub readout: Readout,
    pub critic_hidden: usize,

    pub replay_capacity: usize,
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,

    pub eval_period: u64,
    pub eval_episodes: usize,
    pub checkpoint_period: u64,
    /// Write elapsed wall-clock time into metrics; off for byte-reproducible output.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algorithm::Ccoma,
            seed: 0,
            total_steps: 2_000_000,
            batch_size: 8,
            gamma: 0.99,
            lambda: 0.8,
            optimizer: RmsPropConfig { lr: 1e-3, ..RmsPropConfig::default() },
            grad_clip: 10.0,
            entropy_coef: 5.0,
            entropy_anneal_steps: 150_000,
            explore_start: 0.5,
            explore_end: 0.02,
            explore_anneal_steps: 100_000,
            critic_passes: 8,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 8,
            head_dim: 16,
            hidden_dim: 64,
            readout: Readout::Concat,
            critic_hidden: 128,
            replay_capacity: 5000,
            target_sync: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            eval_period: 10_000,
            eval_episodes: 96,
            checkpoint_period: 0,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.alpha) || !(o.eps > 0.0) {
            return bad("optimizer needs lr > 0, alpha in [0, 1), eps > 0");
        }
        if !(self.grad_clip > 0.0) || self.entropy_coef < 0.0 {
            return bad("grad_clip must be positive and entropy_coef non-negative");
        }
        let dims = [
            self.embed_dim,
            self.n_heads,
            self.head_dim,
            self.hidden_dim,
            self.critic_hidden,
        ];
        if dims.contains(&0) {
            return bad("network sizes must be positive");
        }
        if self.replay_capacity == 0 || self.target_sync == 0 {
            return bad("replay_capacity and target_sync must be positive");
        }
        let probs = [
            self.epsilon_start,
            self.epsilon_end,
            self.explore_start,
            self.explore_end,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("exploration rates must lie in [0, 1]");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        Ok(())
    }

    pub fn policy_config(&self, spec: &EnvSpec) -> PolicyConfig {
        PolicyConfig {
            obs_dim: spec.obs_dim,
            n_actions: spec.n_actions,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            hidden_dim: self.hidden_dim,
            readout: self.readout,
        }
    }

    pub fn critic_config(&self, spec: &EnvSpec) -> CriticConfig {
        CriticConfig {
            state_dim: spec.state_dim,
            obs_dim: spec.obs_dim,
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            hidden_dim: self.critic_hidden,
        }
    }

    /// Epsilon-greedy rate of the value-based baseline.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        anneal(self.epsilon_start, self.epsilon_end, self.epsilon_anneal_steps, step)
    }

    pub fn entropy_at(&self, step: u64) -> f64 {
        if self.entropy_anneal_steps == 0 {
            return self.entropy_coef;
        }
        anneal(self.entropy_coef, 0.0, self.entropy_anneal_steps, step)
    }

    /// Uniform mixing weight of the actor's sampling distribution.
    pub fn explore_at(&self, step: u64) -> f64 {
        anneal(self.explore_start, self.explore_end, self.explore_anneal_steps, step)
    }
}

fn anneal(start: f64, end: f64, steps: u64, at: u64) -> f64 {
    if steps == 0 {
        return end;
    }
    let frac = (at as f64 / steps as f64).min(1.0);
    start + frac * (end - start)
}
