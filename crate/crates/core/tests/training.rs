//! Update rules on small synthetic tasks with known answers.

use ccoma::critic::{Critic, CriticConfig};
use ccoma::env::{EnvSpec, MultiAgentEnv, Observation, StepInfo, StepOutcome};
use ccoma::optim::{RmsProp, RmsPropConfig};
use ccoma::policy::{AdjacencyMask, BoundPolicy, CommPolicy, PolicyConfig, Readout};
use ccoma::train::a2c::{actor_critic_update, ActorCriticSettings};
use ccoma::train::iql::q_learning_update;
use ccoma::train::rollout::{
    batched_step, run_episodes, unroll, CommMode, Episode, EpisodeBatch, NoObserver, Selection,
};
use ccoma::{Error, Result, Tape64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every agent sees the same cue bit each step and earns 0.5 for matching it.
struct CueGame {
    agents: usize,
    horizon: usize,
    wired: bool,
    rng: ChaCha8Rng,
    cue: usize,
    t: usize,
}

impl CueGame {
    fn new(agents: usize, wired: bool) -> Self {
        CueGame {
            agents,
            horizon: 4,
            wired,
            rng: ChaCha8Rng::seed_from_u64(0),
            cue: 0,
            t: 0,
        }
    }
}

impl MultiAgentEnv for CueGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.agents,
            n_actions: 2,
            obs_dim: 3,
            state_dim: 3 * self.agents,
            horizon: self.horizon,
        }
    }

    fn reset_episode(&mut self, seed: u64, _training_step: u64) -> Result<Observation> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.cue = self.rng.random_range(0..2);
        self.t = 0;
        Ok(self.observation())
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        let hits = actions.iter().filter(|a| **a == Some(self.cue)).count();
        self.t += 1;
        self.cue = self.rng.random_range(0..2);
        Ok(StepOutcome {
            observation: self.observation(),
            reward: 0.5 * hits as f64,
            done: self.t >= self.horizon,
            info: StepInfo::default(),
        })
    }

    fn observation(&self) -> Observation {
        let n = self.agents;
        let mut row = vec![0.0; 3];
        row[self.cue] = 1.0;
        row[2] = self.t as f64 / self.horizon as f64;
        let obs: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
        Observation {
            state: obs.clone(),
            obs,
            obs_dim: 3,
            active: vec![true; n],
            fresh: vec![false; n],
            available: vec![true; 2 * n],
            n_actions: 2,
            adjacency: if self.wired {
                AdjacencyMask::full(n)
            } else {
                AdjacencyMask::identity(n)
            },
        }
    }

    fn trace_record(&self) -> Option<serde_json::Value> {
        None
    }
}

/// Single agent, two steps: state 0 pays 1 for action 0, state 1 pays 2 for action 1.
struct Chain {
    t: usize,
}

impl MultiAgentEnv for Chain {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 1,
            n_actions: 2,
            obs_dim: 2,
            state_dim: 2,
            horizon: 2,
        }
    }

    fn reset_episode(&mut self, _seed: u64, _training_step: u64) -> Result<Observation> {
        self.t = 0;
        Ok(self.observation())
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        let a = actions[0].ok_or_else(|| Error::Env("missing action".into()))?;
        let reward = match (self.t, a) {
            (0, 0) => 1.0,
            (1, 1) => 2.0,
            _ => 0.0,
        };
        self.t += 1;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.t >= 2,
            info: StepInfo::default(),
        })
    }

    fn observation(&self) -> Observation {
        let mut obs = vec![0.0; 2];
        obs[self.t.min(1)] = 1.0;
        Observation {
            state: obs.clone(),
            obs,
            obs_dim: 2,
            active: vec![true],
            fresh: vec![false],
            available: vec![true, true],
            n_actions: 2,
            adjacency: AdjacencyMask::identity(1),
        }
    }

    fn trace_record(&self) -> Option<serde_json::Value> {
        None
    }
}

fn small_policy(spec: &EnvSpec, seed: u64) -> CommPolicy<f64> {
    let cfg = PolicyConfig {
        embed_dim: 8,
        n_heads: 2,
        head_dim: 4,
        hidden_dim: 8,
        readout: Readout::Concat,
        ..PolicyConfig::new(spec.obs_dim, spec.n_actions)
    };
    CommPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small_critic(spec: &EnvSpec, seed: u64) -> Critic<f64> {
    let cfg = CriticConfig {
        state_dim: spec.state_dim,
        obs_dim: spec.obs_dim,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        hidden_dim: 16,
    };
    Critic::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn settings(comm: CommMode) -> ActorCriticSettings {
    ActorCriticSettings {
        gamma: 0.99,
        lambda: 0.8,
        grad_clip: 10.0,
        entropy_coef: 0.0,
        explore: 0.0,
        critic_passes: 1,
        comm,
    }
}

fn envs(n: usize, make: impl Fn() -> CueGame) -> Vec<Box<dyn MultiAgentEnv + Send>> {
    (0..n).map(|_| Box::new(make()) as Box<dyn MultiAgentEnv + Send>).collect()
}

fn collect(
    policy: &CommPolicy<f64>,
    envs: &mut [Box<dyn MultiAgentEnv + Send>],
    round: u64,
    comm: CommMode,
    rng: &mut ChaCha8Rng,
) -> EpisodeBatch {
    let seeds: Vec<u64> = (0..envs.len() as u64).map(|b| round * 100 + b).collect();
    run_episodes(policy, envs, &seeds, 0, Selection::Sample, comm, rng, &mut NoObserver).unwrap()
}

fn bits(params: &[Tensor64]) -> Vec<u64> {
    params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_advantages_leave_the_actor_untouched() {
    let mut game = envs(4, || CueGame::new(3, true));
    let spec = game[0].spec();
    let mut policy = small_policy(&spec, 1);
    let mut critic = small_critic(&spec, 2);
    // A zero output layer makes Q constant, so every advantage vanishes.
    for i in [4, 5] {
        critic.params.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut popt = RmsProp::new(RmsPropConfig::default(), &policy.params);
    let mut copt = RmsProp::new(RmsPropConfig::default(), &critic.params);
    let before = bits(policy.params.tensors());
    let critic_before = bits(critic.params.tensors());
    let batch = collect(&policy, &mut game, 0, CommMode::Graph, &mut ChaCha8Rng::seed_from_u64(3));
    let stats = actor_critic_update(
        &mut policy,
        &mut critic,
        &mut popt,
        &mut copt,
        &batch,
        &settings(CommMode::Graph),
    )
    .unwrap();
    assert_eq!(stats.grad_norm, 0.0);
    assert_eq!(bits(policy.params.tensors()), before);
    assert_ne!(bits(critic.params.tensors()), critic_before);
}

fn first_agent_log_probs(policy: &CommPolicy<f64>, obs: &Observation, comm: CommMode) -> Vec<f64> {
    let mut tape = Tape64::new();
    let bound: BoundPolicy = policy.bind(&mut tape, false);
    let step = batched_step(&mut tape, policy, &bound, &[Some(obs)], None, comm).unwrap();
    tape.value(step.output.unwrap().log_probs).row(0).to_vec()
}

#[test]
fn isolated_agents_ignore_teammates() {
    let game = CueGame::new(3, true);
    let policy = small_policy(&game.spec(), 4);
    let base = game.observation();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut changed_under_graph = 0;
    for _ in 0..20 {
        let mut other = base.clone();
        for v in &mut other.obs[3..] {
            *v = rng.random_range(-1.0..1.0);
        }
        assert_eq!(
            first_agent_log_probs(&policy, &base, CommMode::Isolated),
            first_agent_log_probs(&policy, &other, CommMode::Isolated)
        );
        let wired_base = first_agent_log_probs(&policy, &base, CommMode::Graph);
        changed_under_graph += (wired_base != first_agent_log_probs(&policy, &other, CommMode::Graph)) as usize;
    }
    assert_eq!(changed_under_graph, 20);
}

#[test]
fn isolated_update_matches_graph_update_on_identity_graphs() {
    let run = |comm: CommMode| {
        let mut game = envs(3, || CueGame::new(2, false));
        let spec = game[0].spec();
        let mut policy = small_policy(&spec, 6);
        let mut critic = small_critic(&spec, 7);
        let mut popt = RmsProp::new(RmsPropConfig::default(), &policy.params);
        let mut copt = RmsProp::new(RmsPropConfig::default(), &critic.params);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for round in 0..5 {
            let batch = collect(&policy, &mut game, round, comm, &mut rng);
            actor_critic_update(&mut policy, &mut critic, &mut popt, &mut copt, &batch, &settings(comm))
                .unwrap();
        }
        (bits(policy.params.tensors()), bits(critic.params.tensors()))
    };
    assert_eq!(run(CommMode::Graph), run(CommMode::Isolated));
}

fn smoke(comm: CommMode) -> (f64, f64, f64, f64) {
    let mut game = envs(8, || CueGame::new(3, true));
    let spec = game[0].spec();
    let mut policy = small_policy(&spec, 9);
    let mut critic = small_critic(&spec, 10);
    let lr = RmsPropConfig { lr: 2e-3, ..RmsPropConfig::default() };
    let mut popt = RmsProp::new(lr, &policy.params);
    let mut copt = RmsProp::new(lr, &critic.params);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut losses, mut returns) = (Vec::new(), Vec::new());
    for round in 0..600 {
        let batch = collect(&policy, &mut game, round, comm, &mut rng);
        returns.push(batch.episodes.iter().map(Episode::total_return).sum::<f64>() / 8.0);
        let stats =
            actor_critic_update(&mut policy, &mut critic, &mut popt, &mut copt, &batch, &settings(comm)).unwrap();
        losses.push(stats.critic_loss);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&losses[..10]), mean(&losses[590..]), mean(&returns[..10]), mean(&returns[590..]))
}

#[test]
fn communicating_actor_critic_learns_the_cue_game() {
    let (loss_start, loss_end, ret_start, ret_end) = smoke(CommMode::Graph);
    assert!(loss_end < 0.5 * loss_start, "critic loss {loss_start} -> {loss_end}");
    assert!(ret_end > ret_start + 0.5, "return {ret_start} -> {ret_end}");
}

#[test]
fn isolated_actor_critic_learns_the_cue_game() {
    let (loss_start, loss_end, ret_start, ret_end) = smoke(CommMode::Isolated);
    assert!(loss_end < 0.5 * loss_start, "critic loss {loss_start} -> {loss_end}");
    assert!(ret_end > ret_start + 0.5, "return {ret_start} -> {ret_end}");
}

/// Action values the network assigns at both chain states.
fn chain_values(policy: &CommPolicy<f64>, episode: &Episode) -> [Vec<f64>; 2] {
    let mut tape = Tape64::new();
    let bound = policy.bind(&mut tape, false);
    let steps = unroll(&mut tape, policy, &bound, &[episode], CommMode::Graph).unwrap();
    let row = |t: usize| tape.value(steps[t].output.as_ref().unwrap().logits).row(0).to_vec();
    [row(0), row(1)]
}

#[test]
fn q_learning_recovers_chain_values() {
    let gamma = 0.99;
    let mut envs: Vec<Box<dyn MultiAgentEnv + Send>> =
        (0..16).map(|_| Box::new(Chain { t: 0 }) as Box<dyn MultiAgentEnv + Send>).collect();
    let spec = envs[0].spec();
    let mut policy = small_policy(&spec, 12);
    let seeds: Vec<u64> = (0..16).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batch = run_episodes(
        &policy,
        &mut envs,
        &seeds,
        0,
        Selection::EpsilonGreedy(1.0),
        CommMode::Graph,
        &mut rng,
        &mut NoObserver,
    )
    .unwrap();
    let mut seen = [[false; 2]; 2];
    for e in &batch.episodes {
        for (t, tr) in e.transitions.iter().enumerate() {
            seen[t][tr.actions[0].unwrap()] = true;
        }
    }
    assert_eq!(seen, [[true; 2]; 2], "uniform behaviour should try every action");

    let episodes: Vec<&Episode> = batch.episodes.iter().collect();
    let mut target = policy.clone();
    for (lr, updates) in [(2e-3, 3000), (2e-4, 2000), (2e-5, 1000)] {
        let mut opt = RmsProp::new(RmsPropConfig { lr, ..RmsPropConfig::default() }, &policy.params);
        for k in 0..updates {
            if k % 100 == 0 {
                target = policy.clone();
            }
            q_learning_update(&mut policy, &target, &mut opt, &episodes, gamma, 10.0, CommMode::Graph).unwrap();
        }
    }

    // Dynamic programming on the two states.
    let last = [0.0, 2.0];
    let first = [1.0 + gamma * 2.0, gamma * 2.0];
    let [q0, q1] = chain_values(&policy, episodes[0]);
    for a in 0..2 {
        assert!((q1[a] - last[a]).abs() < 1e-3, "Q(s1, {a}) = {}", q1[a]);
        assert!((q0[a] - first[a]).abs() < 1e-3, "Q(s0, {a}) = {}", q0[a]);
    }
}
