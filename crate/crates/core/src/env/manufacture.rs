//! Two-step manufacturing line.
//!
//! Six machines: slots 0..3 run the first step, 3..6 the second. First-step
//! producers put parts into an unbounded buffer; second-step producers take
//! parts from the buffer as it stood at the start of the step (greedily, by
//! machine index) and finish products. Machines age through four health
//! states with gamma-distributed durations and must be maintained once
//! severely worn.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_actions, EnvSpec, MultiAgentEnv, Observation, StepInfo, StepOutcome};
use crate::error::{Error, Result};
use crate::policy::AdjacencyMask;

pub const N_MACHINES: usize = 6;
pub const MACHINES_PER_STEP: usize = 3;
pub const PRODUCE: usize = 0;
pub const STOP: usize = 1;
pub const MAINTAIN: usize = 2;
pub const N_ACTIONS: usize = 3;
pub const OBS_DIM: usize = 4 + N_MACHINES + 1 + N_ACTIONS + 1;
pub const CURRICULUM_INTERVAL: u64 = 425_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    PreMature,
    Mature,
    SlightlyWorn,
    SeverelyWorn,
}

impl Health {
    pub const ALL: [Health; 4] = [
        Health::PreMature,
        Health::Mature,
        Health::SlightlyWorn,
        Health::SeverelyWorn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn next(self) -> Health {
        match self {
            Health::PreMature => Health::Mature,
            Health::Mature => Health::SlightlyWorn,
            _ => Health::SeverelyWorn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManufactureConfig {
    pub p_product: f64,
    pub n_product: u32,
    pub c_op: f64,
    pub c_stop: f64,
    pub c_maint: f64,
    pub c_broke: f64,
    /// Mean duration of the pre-mature, mature and slightly-worn states.
    pub state_means: [f64; 3],
    pub maintenance_mean: f64,
    pub gamma_scale: f64,
    pub horizon: usize,
    pub wear_while_stopped: bool,
    /// Randomize initial machine states according to the training step.
    pub curriculum: bool,
}

impl Default for ManufactureConfig {
    fn default() -> Self {
        ManufactureConfig {
            p_product: 10.0,
            n_product: 1,
            c_op: 1.0,
            c_stop: 0.25,
            c_maint: 5.0,
            c_broke: 20.0,
            state_means: [6.0, 12.0, 8.0],
            maintenance_mean: 4.0,
            gamma_scale: 2.0,
            horizon: 48,
            wear_while_stopped: false,
            curriculum: true,
        }
    }
}

impl ManufactureConfig {
    pub fn validate(&self) -> Result<()> {
        let costs = [self.p_product, self.c_op, self.c_stop, self.c_maint, self.c_broke];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config("manufacture prices and costs must be non-negative".into()));
        }
        let means = self.state_means.iter().chain([&self.maintenance_mean]);
        if means.into_iter().any(|m| !(*m > 0.0)) || !(self.gamma_scale > 0.0) {
            return Err(Error::Config("gamma means and scale must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Machines with random initial state at a given training step.
pub fn curriculum_level(training_step: u64) -> usize {
    (2 * (training_step / CURRICULUM_INTERVAL) as usize).min(N_MACHINES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub health: Health,
    pub time_in_state: u32,
    /// Sampled length of the current health state; unused once severely worn.
    pub duration: f64,
    /// Remaining maintenance steps; 0 when not under maintenance.
    pub maintenance: u32,
    pub last_action: usize,
}

impl Machine {
    pub fn brand_new(duration: f64) -> Self {
        Machine {
            health: Health::PreMature,
            time_in_state: 0,
            duration,
            maintenance: 0,
            last_action: STOP,
        }
    }

    pub fn forced_maintenance(&self) -> bool {
        self.maintenance > 0 || self.health == Health::SeverelyWorn
    }
}

/// Per-step tally of what happened, enough to recompute the reward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTally {
    pub producing: usize,
    pub stopped: usize,
    pub maintaining: usize,
    pub broke: usize,
    pub step1_output: u32,
    pub step2_intake: u32,
    pub completed: u32,
}

impl StepTally {
    pub fn reward(&self, c: &ManufactureConfig) -> f64 {
        c.p_product * self.completed as f64
            - self.producing as f64 * c.c_op
            - self.stopped as f64 * c.c_stop
            - self.maintaining as f64 * c.c_maint
            - self.broke as f64 * c.c_broke
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManufacturingLine {
    config: ManufactureConfig,
    machines: Vec<Machine>,
    buffer: u32,
    rng: ChaCha8Rng,
    t: usize,
    last: Option<(Vec<usize>, StepTally, f64)>,
}

impl ManufacturingLine {
    pub fn new(config: ManufactureConfig) -> Result<Self> {
        config.validate()?;
        let machines = (0..N_MACHINES)
            .map(|_| Machine::brand_new(config.state_means[0]))
            .collect();
        Ok(ManufacturingLine {
            config,
            machines,
            buffer: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &ManufactureConfig {
        &self.config
    }

    pub fn machines(&self) -> &[Machine] {
        &self.machines
    }

    pub fn buffer(&self) -> u32 {
        self.buffer
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn set_machine(&mut self, index: usize, machine: Machine) {
        self.machines[index] = machine;
    }

    pub fn set_buffer(&mut self, buffer: u32) {
        self.buffer = buffer;
    }

    pub fn last_tally(&self) -> Option<&StepTally> {
        self.last.as_ref().map(|(_, tally, _)| tally)
    }

    fn gamma_sample(&mut self, mean: f64) -> f64 {
        let scale = self.config.gamma_scale;
        let g = Gamma::new(mean / scale, scale).expect("validated gamma parameters");
        g.sample(&mut self.rng)
    }

    pub fn sample_state_duration(&mut self, health: Health) -> f64 {
        match health {
            Health::SeverelyWorn => 0.0,
            h => self.gamma_sample(self.config.state_means[h.index()]),
        }
    }

    pub fn sample_maintenance_steps(&mut self) -> u32 {
        let d = self.gamma_sample(self.config.maintenance_mean);
        (d.ceil() as u32).max(1)
    }

    /// Starts an episode with `n_randomized` machines in a random state.
    pub fn reset(&mut self, seed: u64, n_randomized: usize) -> Result<Observation> {
        if n_randomized > N_MACHINES || !n_randomized.is_multiple_of(2) {
            return Err(Error::Env(format!(
                "n_randomized must be even and at most {N_MACHINES}, got {n_randomized}"
            )));
        }
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.buffer = 0;
        self.t = 0;
        self.last = None;
        for i in 0..N_MACHINES {
            let d = self.sample_state_duration(Health::PreMature);
            self.machines[i] = Machine::brand_new(d);
        }
        let chosen = sample(&mut self.rng, N_MACHINES, n_randomized).into_vec();
        for i in chosen {
            let health = Health::ALL[self.rng.random_range(0..4)];
            let duration = self.sample_state_duration(health);
            let frac: f64 = self.rng.random();
            self.machines[i] = Machine {
                health,
                time_in_state: (frac * duration).floor() as u32,
                duration,
                maintenance: 0,
                last_action: STOP,
            };
        }
        Ok(self.observation())
    }

    pub fn available(&self, index: usize) -> [bool; N_ACTIONS] {
        if self.machines[index].forced_maintenance() {
            [false, false, true]
        } else {
            [true; N_ACTIONS]
        }
    }

    fn wear(&mut self, index: usize, tally: &mut StepTally) {
        let m = &mut self.machines[index];
        if m.health == Health::SeverelyWorn {
            return;
        }
        m.time_in_state += 1;
        if m.time_in_state as f64 >= m.duration {
            let next = m.health.next();
            if next == Health::SeverelyWorn {
                tally.broke += 1;
            }
            let duration = self.sample_state_duration(next);
            let m = &mut self.machines[index];
            m.health = next;
            m.time_in_state = 0;
            m.duration = duration;
        }
    }

    pub fn step_actions(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        if self.t >= self.config.horizon {
            return Err(Error::Env("episode already finished".into()));
        }
        check_actions(actions, &[true; N_MACHINES], N_ACTIONS)?;
        let actions: Vec<usize> = actions.iter().map(|a| a.unwrap()).collect();
        for (i, &a) in actions.iter().enumerate() {
            if !self.available(i)[a] {
                return Err(Error::Env(format!("machine {i} must be maintained, got action {a}")));
            }
        }

        let n = self.config.n_product;
        let mut tally = StepTally::default();
        let mut stock = self.buffer;
        for (i, &a) in actions.iter().enumerate() {
            match a {
                PRODUCE => {
                    tally.producing += 1;
                    if i < MACHINES_PER_STEP {
                        tally.step1_output += n;
                    } else {
                        let take = n.min(stock);
                        stock -= take;
                        tally.step2_intake += take;
                        tally.completed += take;
                    }
                    self.wear(i, &mut tally);
                }
                STOP => {
                    tally.stopped += 1;
                    if self.config.wear_while_stopped {
                        self.wear(i, &mut tally);
                    }
                }
                _ => {
                    tally.maintaining += 1;
                    if self.machines[i].maintenance == 0 {
                        self.machines[i].maintenance = self.sample_maintenance_steps();
                    }
                    self.machines[i].maintenance -= 1;
                    if self.machines[i].maintenance == 0 {
                        let d = self.sample_state_duration(Health::PreMature);
                        self.machines[i] = Machine::brand_new(d);
                    }
                }
            }
            self.machines[i].last_action = a;
        }
        self.buffer = self.buffer + tally.step1_output - tally.step2_intake;

        let reward = tally.reward(&self.config);
        self.t += 1;
        let done = self.t >= self.config.horizon;
        let products = tally.completed as usize;
        self.last = Some((actions, tally, reward));
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done,
            info: StepInfo {
                collisions: 0,
                products,
                success: None,
            },
        })
    }

    pub fn observe(&self, index: usize) -> Vec<f64> {
        let m = &self.machines[index];
        let mut out = vec![0.0; OBS_DIM];
        out[m.health.index()] = 1.0;
        out[4 + index] = 1.0;
        out[10] = m.time_in_state as f64 / self.config.horizon as f64;
        out[11 + m.last_action] = 1.0;
        out[14] = if m.maintenance > 0 { 1.0 } else { 0.0 };
        out
    }
}

impl MultiAgentEnv for ManufacturingLine {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: N_MACHINES,
            n_actions: N_ACTIONS,
            obs_dim: OBS_DIM,
            state_dim: N_MACHINES * OBS_DIM,
            horizon: self.config.horizon,
        }
    }

    fn reset_episode(&mut self, seed: u64, training_step: u64) -> Result<Observation> {
        let level = if self.config.curriculum {
            curriculum_level(training_step)
        } else {
            0
        };
        self.reset(seed, level)
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        self.step_actions(actions)
    }

    fn observation(&self) -> Observation {
        let obs: Vec<f64> = (0..N_MACHINES).flat_map(|i| self.observe(i)).collect();
        Observation {
            state: obs.clone(),
            obs,
            obs_dim: OBS_DIM,
            active: vec![true; N_MACHINES],
            fresh: vec![false; N_MACHINES],
            available: (0..N_MACHINES).flat_map(|i| self.available(i)).collect(),
            n_actions: N_ACTIONS,
            adjacency: {
                let mut m = AdjacencyMask::full(N_MACHINES);
                m.timestep = self.t;
                m
            },
        }
    }

    fn trace_record(&self) -> Option<serde_json::Value> {
        let (actions, tally, reward) = self.last.as_ref()?;
        let health: Vec<Health> = self.machines.iter().map(|m| m.health).collect();
        Some(json!({
            "step": self.t,
            "health": health,
            "actions": actions,
            "buffer": self.buffer,
            "n_t": tally.completed,
            "reward": reward,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> ManufacturingLine {
        let mut l = ManufacturingLine::new(ManufactureConfig::default()).unwrap();
        l.reset(0, 0).unwrap();
        l
    }

    fn healthy(duration: f64) -> Machine {
        Machine::brand_new(duration)
    }

    #[test]
    fn worked_reward_example() {
        let mut l = line();
        for i in 0..N_MACHINES {
            l.set_machine(i, healthy(100.0));
        }
        l.set_buffer(10);
        let acts = [PRODUCE, PRODUCE, STOP, PRODUCE, PRODUCE, MAINTAIN].map(Some);
        let out = l.step_actions(&acts).unwrap();
        assert_eq!(out.info.products, 2);
        assert!((out.reward - 10.75).abs() < 1e-12);
        assert_eq!(l.buffer(), 10);
    }

    #[test]
    fn all_stop_costs_idle_fee() {
        let mut l = line();
        let out = l.step_actions(&[Some(STOP); 6]).unwrap();
        assert_eq!(out.reward, -1.5);
        assert!(l.machines().iter().all(|m| m.time_in_state == 0));
    }

    #[test]
    fn empty_buffer_step_two_only() {
        let mut l = line();
        let acts = [STOP, STOP, STOP, PRODUCE, PRODUCE, STOP].map(Some);
        let out = l.step_actions(&acts).unwrap();
        assert_eq!(out.info.products, 0);
        assert_eq!(out.reward, -2.0 - 4.0 * 0.25);
    }

    #[test]
    fn intake_is_greedy_by_index() {
        let mut l = line();
        l.set_buffer(1);
        let acts = [STOP, STOP, STOP, STOP, PRODUCE, PRODUCE].map(Some);
        l.step_actions(&acts).unwrap();
        let t = l.last_tally().unwrap();
        assert_eq!((t.step2_intake, t.completed), (1, 1));
        assert_eq!(l.buffer(), 0);
    }

    #[test]
    fn brand_new_observation() {
        let l = line();
        let o = l.observe(2);
        let mut want = vec![0.0; OBS_DIM];
        want[0] = 1.0;
        want[4 + 2] = 1.0;
        want[11 + STOP] = 1.0;
        assert_eq!(o, want);
        let obs = l.observation();
        for i in 0..N_MACHINES {
            assert_eq!(&obs.state[i * OBS_DIM..(i + 1) * OBS_DIM], l.observe(i).as_slice());
        }
    }

    #[test]
    fn severe_wear_forces_maintenance_and_charges_once() {
        let mut l = line();
        l.set_machine(
            0,
            Machine {
                health: Health::SlightlyWorn,
                time_in_state: 4,
                duration: 5.0,
                maintenance: 0,
                last_action: PRODUCE,
            },
        );
        let mut acts = [Some(STOP); 6];
        acts[0] = Some(PRODUCE);
        l.step_actions(&acts).unwrap();
        assert_eq!(l.machines()[0].health, Health::SeverelyWorn);
        assert_eq!(l.last_tally().unwrap().broke, 1);
        assert_eq!(l.available(0), [false, false, true]);
        assert!(l.step_actions(&acts).is_err());
        acts[0] = Some(MAINTAIN);
        l.step_actions(&acts).unwrap();
        assert_eq!(l.last_tally().unwrap().broke, 0);
        let m = &l.machines()[0];
        assert!(m.maintenance > 0 || m.health == Health::PreMature);
        if m.maintenance > 0 {
            assert_eq!(l.observe(0)[14], 1.0);
        }
    }

    #[test]
    fn maintenance_runs_to_completion() {
        let mut l = line();
        let mut acts = [Some(STOP); 6];
        acts[5] = Some(MAINTAIN);
        let mut steps = 0;
        loop {
            l.step_actions(&acts).unwrap();
            steps += 1;
            if l.machines()[5].maintenance == 0 {
                break;
            }
            assert_eq!(l.available(5), [false, false, true]);
        }
        assert!(steps >= 1);
        assert_eq!(l.machines()[5].health, Health::PreMature);
        assert_eq!(l.machines()[5].time_in_state, 0);
    }

    #[test]
    fn wear_switch_ages_stopped_machines() {
        let cfg = ManufactureConfig {
            wear_while_stopped: true,
            ..Default::default()
        };
        let mut l = ManufacturingLine::new(cfg).unwrap();
        l.reset(0, 0).unwrap();
        l.step_actions(&[Some(STOP); 6]).unwrap();
        assert!(l.machines().iter().all(|m| m.time_in_state == 1 || m.health == Health::Mature));
    }

    #[test]
    fn curriculum_schedule() {
        assert_eq!(curriculum_level(0), 0);
        assert_eq!(curriculum_level(424_999), 0);
        assert_eq!(curriculum_level(425_000), 2);
        assert_eq!(curriculum_level(500_000), 2);
        assert_eq!(curriculum_level(850_000), 4);
        assert_eq!(curriculum_level(1_275_000), 6);
        assert_eq!(curriculum_level(2_000_000), 6);
    }

    #[test]
    fn reset_validation_and_determinism() {
        let mut a = line();
        assert!(a.reset(1, 3).is_err());
        assert!(a.reset(1, 8).is_err());
        let mut b = line();
        assert_eq!(a.reset(9, 4).unwrap(), b.reset(9, 4).unwrap());
        assert_eq!(a.machines(), b.machines());
        let o = a.reset(9, 0).unwrap();
        assert!(a.machines().iter().all(|m| m.health == Health::PreMature && m.time_in_state == 0));
        assert!(o.available.iter().all(|&x| x));
    }

    #[test]
    fn horizon_ends_episode() {
        let mut l = line();
        for t in 0..48 {
            let out = l.step_actions(&[Some(STOP); 6]).unwrap();
            assert_eq!(out.done, t == 47);
        }
        assert!(l.step_actions(&[Some(STOP); 6]).is_err());
    }
}
