//! Traffic junction.
//!
//! Cars enter at arrival points, follow a fixed route and leave when they
//! reach its last cell. Each step a car either gases (one cell forward) or
//! brakes. Cars sharing a cell are in collision; the only consequence is the
//! collision penalty.
//!
//! Step order: validate actions, move cars and age them (`tau += 1`), remove
//! cars that reached their goal, count collisions, compute the reward, then
//! sample arrivals (one Bernoulli draw per arrival point). New cars start with
//! `tau = 0` and act from the next step on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::routes::{RouteTable, EASY_ROUTES, HARD_ROUTES};
use super::{check_actions, EnvSpec, MultiAgentEnv, Observation, StepInfo, StepOutcome};
use crate::error::{Error, Result};
use crate::policy::AdjacencyMask;

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;
pub const VISION_CELLS: usize = 9;
pub const CELL_FEATURES: usize = 3;
pub const OBS_DIM: usize = VISION_CELLS * CELL_FEATURES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficMode {
    Easy,
    Hard,
    Harder,
}

impl std::str::FromStr for TrafficMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(TrafficMode::Easy),
            "hard" => Ok(TrafficMode::Hard),
            "harder" => Ok(TrafficMode::Harder),
            other => Err(Error::Config(format!("unknown traffic mode {other}"))),
        }
    }
}

impl std::fmt::Display for TrafficMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrafficMode::Easy => "easy",
            TrafficMode::Hard => "hard",
            TrafficMode::Harder => "harder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub mode: TrafficMode,
    pub n_max: usize,
    pub p_arrive: f64,
    pub r_coll: f64,
    pub r_time: f64,
    pub horizon: usize,
}

impl TrafficConfig {
    pub fn for_mode(mode: TrafficMode) -> Self {
        let (n_max, p_arrive) = match mode {
            TrafficMode::Easy => (5, 0.30),
            TrafficMode::Hard => (20, 0.05),
            TrafficMode::Harder => (20, 0.10),
        };
        TrafficConfig {
            mode,
            n_max,
            p_arrive,
            r_coll: -10.0,
            r_time: -0.01,
            horizon: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_arrive > 0.0 && self.p_arrive <= 1.0) {
            return Err(Error::Config(format!("p_arrive must be in (0, 1], got {}", self.p_arrive)));
        }
        if self.r_coll >= 0.0 || self.r_time >= 0.0 {
            return Err(Error::Config("r_coll and r_time must be negative".into()));
        }
        if self.n_max == 0 || self.horizon == 0 {
            return Err(Error::Config("n_max and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn route_table(&self) -> RouteTable {
        let text = match self.mode {
            TrafficMode::Easy => EASY_ROUTES,
            TrafficMode::Hard | TrafficMode::Harder => HARD_ROUTES,
        };
        RouteTable::parse(text).expect("shipped route table is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Car {
    /// 1-based id; the car occupies slot `id - 1`.
    pub id: usize,
    /// 0-based index into the route table.
    pub route: usize,
    pub cursor: usize,
    pub tau: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LastStep {
    actions: Vec<(usize, usize)>,
    reward: f64,
    collisions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrafficJunction {
    config: TrafficConfig,
    #[serde(skip, default)]
    table: Option<RouteTable>,
    cars: Vec<Option<Car>>,
    fresh: Vec<bool>,
    rng: ChaCha8Rng,
    t: usize,
    collided: bool,
    last: Option<LastStep>,
}

impl TrafficJunction {
    pub fn new(config: TrafficConfig) -> Result<Self> {
        config.validate()?;
        let table = config.route_table();
        let n = config.n_max;
        Ok(TrafficJunction {
            config,
            table: Some(table),
            cars: vec![None; n],
            fresh: vec![false; n],
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            collided: false,
            last: None,
        })
    }

    pub fn config(&self) -> &TrafficConfig {
        &self.config
    }

    pub fn table(&self) -> &RouteTable {
        self.table.as_ref().expect("route table loaded")
    }

    pub fn cars(&self) -> impl Iterator<Item = &Car> {
        self.cars.iter().flatten()
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.cars.iter_mut().for_each(|c| *c = None);
        self.fresh.iter_mut().for_each(|f| *f = false);
        self.t = 0;
        self.collided = false;
        self.last = None;
        self.observation()
    }

    /// Places cars directly; each car goes to slot `id - 1`.
    pub fn set_cars(&mut self, cars: Vec<Car>) -> Result<()> {
        self.cars.iter_mut().for_each(|c| *c = None);
        for car in cars {
            if car.id == 0 || car.id > self.config.n_max {
                return Err(Error::Env(format!("car id {} out of range", car.id)));
            }
            if car.route >= self.table().routes.len()
                || car.cursor + 1 >= self.table().routes[car.route].len()
            {
                return Err(Error::Env(format!("car {} has an invalid route position", car.id)));
            }
            let slot = car.id - 1;
            self.cars[slot] = Some(car);
        }
        Ok(())
    }

    pub fn position(&self, car: &Car) -> usize {
        self.table().routes[car.route][car.cursor]
    }

    pub fn active(&self) -> Vec<bool> {
        self.cars.iter().map(Option::is_some).collect()
    }

    /// Number of cars standing on a cell shared with at least one other car.
    pub fn collision_count(&self) -> usize {
        let mut cells: Vec<usize> = self.cars().map(|c| self.position(c)).collect();
        cells.sort_unstable();
        let mut count = 0;
        let mut i = 0;
        while i < cells.len() {
            let mut j = i;
            while j < cells.len() && cells[j] == cells[i] {
                j += 1;
            }
            if j - i > 1 {
                count += j - i;
            }
            i = j;
        }
        count
    }

    /// `C * r_coll + sum(tau) * r_time` over cars currently present.
    pub fn reward_now(&self) -> f64 {
        let taus: f64 = self.cars().map(|c| c.tau as f64).sum();
        self.collision_count() as f64 * self.config.r_coll + taus * self.config.r_time
    }

    /// 3x3 neighbourhood of `slot`, row-major, 3 features per cell.
    pub fn observe(&self, slot: usize) -> Vec<f64> {
        let mut out = vec![0.0; OBS_DIM];
        let Some(me) = self.cars.get(slot).and_then(Option::as_ref) else {
            return out;
        };
        let table = self.table();
        let (rows, cols) = (table.rows as i64, table.cols as i64);
        let (r0, c0) = table.cell(self.position(me));
        let n_cells = (table.rows * table.cols) as f64;
        let n_routes = table.routes.len() as f64;
        for (k, (dr, dc)) in (-1i64..=1).flat_map(|dr| (-1i64..=1).map(move |dc| (dr, dc))).enumerate() {
            let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
            if r < 0 || c < 0 || r >= rows || c >= cols {
                continue;
            }
            let cell = (r * cols + c) as usize;
            let occupant = if dr == 0 && dc == 0 {
                Some(me)
            } else {
                self.cars().find(|o| self.position(o) == cell)
            };
            if let Some(o) = occupant {
                out[k * 3] = o.id as f64 / self.config.n_max as f64;
                out[k * 3 + 1] = cell as f64 / n_cells;
                out[k * 3 + 2] = (o.route + 1) as f64 / n_routes;
            }
        }
        out
    }

    /// Cars within each other's 3x3 vision are connected.
    pub fn build_adjacency(&self) -> AdjacencyMask {
        let table = self.table();
        let pos: Vec<Option<(usize, usize)>> = self
            .cars
            .iter()
            .map(|c| c.as_ref().map(|c| table.cell(self.position(c))))
            .collect();
        AdjacencyMask::from_fn(self.config.n_max, self.t, |i, j| match (pos[i], pos[j]) {
            (Some(a), Some(b)) => a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1,
            _ => false,
        })
    }

    fn spawn_arrivals(&mut self) {
        let arrivals = self.table().arrival_points();
        for arrival in arrivals {
            if !self.rng.random_bool(self.config.p_arrive) {
                continue;
            }
            let Some(slot) = self.cars.iter().position(Option::is_none) else {
                continue;
            };
            let occupied = self.cars().any(|c| self.position(c) == arrival);
            if occupied {
                continue;
            }
            let options = self.table().routes_from(arrival);
            let route = options[self.rng.random_range(0..options.len())];
            self.cars[slot] = Some(Car {
                id: slot + 1,
                route,
                cursor: 0,
                tau: 0,
            });
            self.fresh[slot] = true;
        }
    }

    pub fn step_actions(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        if self.t >= self.config.horizon {
            return Err(Error::Env("episode already finished".into()));
        }
        check_actions(actions, &self.active(), 2)?;
        self.fresh.iter_mut().for_each(|f| *f = false);
        let mut applied = Vec::new();
        for slot in 0..self.cars.len() {
            let (Some(action), Some(car)) = (actions[slot], self.cars[slot].as_mut()) else {
                continue;
            };
            applied.push((car.id, action));
            car.tau += 1;
            if action == GAS {
                car.cursor += 1;
            }
            let goal = self.table.as_ref().unwrap().routes[car.route].len() - 1;
            if car.cursor >= goal {
                self.cars[slot] = None;
            }
        }
        let collisions = self.collision_count();
        let reward = self.reward_now();
        self.collided |= collisions > 0;
        self.spawn_arrivals();
        self.t += 1;
        self.last = Some(LastStep {
            actions: applied,
            reward,
            collisions,
        });
        let done = self.t >= self.config.horizon;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done,
            info: StepInfo {
                collisions,
                products: 0,
                success: done.then_some(!self.collided),
            },
        })
    }

    /// JSON snapshot of the full simulator state, including the RNG.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn restore(text: &str) -> Result<Self> {
        let mut env: TrafficJunction = serde_json::from_str(text)?;
        env.config.validate()?;
        env.table = Some(env.config.route_table());
        Ok(env)
    }
}

impl MultiAgentEnv for TrafficJunction {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.config.n_max,
            n_actions: 2,
            obs_dim: OBS_DIM,
            state_dim: self.config.n_max,
            horizon: self.config.horizon,
        }
    }

    fn reset_episode(&mut self, seed: u64, _training_step: u64) -> Result<Observation> {
        Ok(self.reset(seed))
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome> {
        self.step_actions(actions)
    }

    fn observation(&self) -> Observation {
        let n = self.config.n_max;
        let mut obs = Vec::with_capacity(n * OBS_DIM);
        for slot in 0..n {
            obs.extend(self.observe(slot));
        }
        let active = self.active();
        Observation {
            obs,
            obs_dim: OBS_DIM,
            state: active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
            fresh: self.fresh.clone(),
            available: vec![true; n * 2],
            n_actions: 2,
            adjacency: self.build_adjacency(),
            active,
        }
    }

    fn episode_success(&self) -> Option<bool> {
        Some(!self.collided)
    }

    fn trace_record(&self) -> Option<serde_json::Value> {
        let last = self.last.as_ref()?;
        let table = self.table();
        let cars: Vec<usize> = self.cars().map(|c| c.id).collect();
        let positions: Vec<[usize; 2]> = self
            .cars()
            .map(|c| {
                let (r, c) = table.cell(self.position(c));
                [r, c]
            })
            .collect();
        Some(json!({
            "step": self.t,
            "car_ids": cars,
            "positions": positions,
            "actions": last.actions,
            "reward": last.reward,
            "collisions": last.collisions,
        }))
    }

    fn agent_cell(&self, slot: usize) -> Option<(usize, usize)> {
        let car = self.cars.get(slot)?.as_ref()?;
        Some(self.table().cell(self.position(car)))
    }

    fn grid_dims(&self) -> Option<(usize, usize)> {
        Some((self.table().rows, self.table().cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn easy() -> TrafficJunction {
        TrafficJunction::new(TrafficConfig::for_mode(TrafficMode::Easy)).unwrap()
    }

    fn all(env: &TrafficJunction, a: usize) -> Vec<Option<usize>> {
        env.active().iter().map(|&on| on.then_some(a)).collect()
    }

    #[test]
    fn reset_is_empty_and_deterministic() {
        let mut a = easy();
        let mut b = easy();
        let oa = a.reset(7);
        let ob = b.reset(7);
        assert_eq!(oa, ob);
        assert!(oa.active.iter().all(|x| !x));
        assert_eq!(a.reward_now(), 0.0);
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
    }

    #[test]
    fn gas_replay_is_deterministic() {
        let run = || {
            let mut env = easy();
            env.reset(11);
            let mut out = Vec::new();
            for _ in 0..5 {
                let acts = all(&env, GAS);
                let o = env.step_actions(&acts).unwrap();
                out.push((o.reward, env.snapshot().unwrap()));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_on_collision_reward() {
        let mut env = easy();
        env.reset(0);
        // route 0 runs along row 3, route 1 down column 3; both one cell before the junction
        env.set_cars(vec![
            Car { id: 1, route: 0, cursor: 2, tau: 0 },
            Car { id: 2, route: 1, cursor: 2, tau: 0 },
        ])
        .unwrap();
        let out = env
            .step_actions(&[Some(GAS), Some(GAS), None, None, None])
            .unwrap();
        assert_eq!(out.info.collisions, 2);
        assert!((out.reward - (-20.02)).abs() < 1e-12);
    }

    #[test]
    fn braking_car_stays_and_ages() {
        let mut env = easy();
        env.reset(0);
        env.set_cars(vec![Car { id: 3, route: 0, cursor: 1, tau: 4 }]).unwrap();
        let before = env.agent_cell(2);
        env.step_actions(&[None, None, Some(BRAKE), None, None]).unwrap();
        assert_eq!(env.agent_cell(2), before);
        assert_eq!(env.cars[2].as_ref().unwrap().tau, 5);
    }

    #[test]
    fn no_cars_zero_reward() {
        let mut env = easy();
        env.reset(3);
        let out = env.step_actions(&[None; 5]).unwrap();
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn inactive_slot_action_rejected() {
        let mut env = easy();
        env.reset(3);
        assert!(env.step_actions(&[Some(GAS), None, None, None, None]).is_err());
    }

    #[test]
    fn lone_car_sees_only_itself() {
        let mut env = easy();
        env.reset(0);
        env.set_cars(vec![Car { id: 2, route: 0, cursor: 3, tau: 1 }]).unwrap();
        let o = env.observe(1);
        for k in 0..9 {
            let nonzero = o[k * 3..k * 3 + 3].iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, k == 4, "cell {k}");
        }
        assert_eq!(&o[12..15], &[2.0 / 5.0, 24.0 / 49.0, 1.0 / 2.0]);
        assert_eq!(env.build_adjacency(), {
            let mut m = AdjacencyMask::identity(5);
            m.timestep = 0;
            m
        });
    }

    #[test]
    fn car_reaching_goal_is_removed() {
        let mut env = easy();
        env.reset(0);
        env.set_cars(vec![Car { id: 1, route: 0, cursor: 5, tau: 5 }]).unwrap();
        let out = env
            .step_actions(&[Some(GAS), None, None, None, None])
            .unwrap();
        assert!(!env.active()[0] || env.fresh[0]);
        assert_eq!(out.info.collisions, 0);
    }

    #[test]
    fn snapshot_restore_continues_identically() {
        let mut env = easy();
        env.reset(5);
        for _ in 0..6 {
            let a = all(&env, GAS);
            env.step_actions(&a).unwrap();
        }
        let snap = env.snapshot().unwrap();
        let mut copy = TrafficJunction::restore(&snap).unwrap();
        for _ in 0..10 {
            let a = all(&env, BRAKE);
            let x = env.step_actions(&a).unwrap();
            let y = copy.step_actions(&a).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(env.snapshot().unwrap(), copy.snapshot().unwrap());
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut env = easy();
        env.reset(1);
        let mut done = false;
        for t in 0..40 {
            let a = all(&env, BRAKE);
            let out = env.step_actions(&a).unwrap();
            done = out.done;
            assert_eq!(done, t == 39);
        }
        assert!(done);
        assert!(env.step_actions(&[None; 5]).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = TrafficConfig::for_mode(TrafficMode::Easy);
        c.p_arrive = 0.0;
        assert!(TrafficJunction::new(c.clone()).is_err());
        c.p_arrive = 0.3;
        c.r_time = 0.01;
        assert!(TrafficJunction::new(c).is_err());
    }
}
