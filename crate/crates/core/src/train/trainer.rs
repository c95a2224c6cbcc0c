//! Training loop, periodic evaluation and run artifacts.
//!
//! A run directory holds `metrics.jsonl` (one record per evaluation),
//! `checkpoint.bin` and `manifest.json` (effective configuration, its hash,
//! the step counter and the RNG states needed to resume).

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::critic::Critic;
use crate::env::MultiAgentEnv;
use crate::error::{Error, Result};
use crate::optim::RmsProp;
use crate::params::ParamSet;
use crate::policy::{CommPolicy, PolicyConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::a2c::{actor_critic_update, ActorCriticSettings, UpdateStats};
use super::config::{Algorithm, EnvChoice, TrainConfig};
use super::eval::{evaluate_greedy, EvalMetrics};
use super::iql::{q_learning_update, ReplayStore};
use super::rollout::{run_episodes, CommMode, EpisodeBatch, NoObserver, Selection};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NAN_DUMP_FILE: &str = "nan_batch.json";
pub const STEP_UNIT: &str = "environment timesteps summed over parallel environments";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub algo: String,
    pub env: String,
    pub mode: String,
    pub success_rate: Option<f64>,
    pub mean_return: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub rollout: ChaCha8Rng,
    pub env_seeds: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub config_hash: String,
    pub algo: Algorithm,
    pub env: String,
    pub mode: String,
    pub step: u64,
    pub step_unit: String,
    pub updates: u64,
    pub rng_state: RngState,
    pub checkpoint: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Trainable state for one algorithm on one environment.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub env: EnvChoice,
    pub policy: CommPolicy<T>,
    pub critic: Option<Critic<T>>,
    pub target: Option<CommPolicy<T>>,
    policy_opt: RmsProp<T>,
    critic_opt: Option<RmsProp<T>>,
    envs: Vec<Box<dyn MultiAgentEnv + Send>>,
    replay: ReplayStore,
    rng: ChaCha8Rng,
    env_rng: ChaCha8Rng,
    step: u64,
    updates: u64,
    last: Option<UpdateStats>,
    failed_batch: Option<EpisodeBatch>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, env: EnvChoice) -> Result<Self> {
        config.validate()?;
        let envs = (0..config.batch_size)
            .map(|_| env.build())
            .collect::<Result<Vec<_>>>()?;
        let spec = envs[0].spec();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = CommPolicy::new(config.policy_config(&spec), &mut init_rng)?;
        let critic = if config.algo.uses_critic() {
            Some(Critic::new(config.critic_config(&spec), &mut init_rng)?)
        } else {
            None
        };
        let target = (config.algo == Algorithm::IqlComm).then(|| policy.clone());
        let policy_opt = RmsProp::new(config.optimizer, &policy.params);
        let critic_opt = critic
            .as_ref()
            .map(|c| RmsProp::new(config.optimizer, &c.params));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut env_rng = ChaCha8Rng::seed_from_u64(config.seed);
        env_rng.set_stream(2);
        Ok(Trainer {
            replay: ReplayStore::new(config.replay_capacity),
            config,
            env,
            policy,
            critic,
            target,
            policy_opt,
            critic_opt,
            envs,
            rng,
            env_rng,
            step: 0,
            updates: 0,
            last: None,
            failed_batch: None,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn last_stats(&self) -> Option<UpdateStats> {
        self.last
    }

    pub fn comm_mode(&self) -> CommMode {
        if self.config.algo.communicates() {
            CommMode::Graph
        } else {
            CommMode::Isolated
        }
    }

    /// Batch that produced the last numerical failure, if any.
    pub fn failed_batch(&self) -> Option<&EpisodeBatch> {
        self.failed_batch.as_ref()
    }

    /// Collects one episode per environment with the current parameters.
    pub fn collect(&mut self) -> Result<EpisodeBatch> {
        let seeds: Vec<u64> = (0..self.envs.len()).map(|_| self.env_rng.next_u64()).collect();
        let selection = match self.config.algo {
            Algorithm::IqlComm => Selection::EpsilonGreedy(self.config.epsilon_at(self.step)),
            _ => Selection::Explore(self.config.explore_at(self.step)),
        };
        let comm = self.comm_mode();
        run_episodes(
            &self.policy,
            &mut self.envs,
            &seeds,
            self.step,
            selection,
            comm,
            &mut self.rng,
            &mut NoObserver,
        )
    }

    /// Applies one update from `batch` and advances the step counter.
    pub fn learn(&mut self, batch: EpisodeBatch) -> Result<UpdateStats> {
        let explore = self.config.explore_at(self.step);
        let entropy_coef = self.config.entropy_at(self.step);
        self.step += batch.env_steps();
        let comm = self.comm_mode();
        let result = match self.config.algo {
            Algorithm::Ccoma | Algorithm::Coma => {
                let settings = ActorCriticSettings {
                    gamma: self.config.gamma,
                    lambda: self.config.lambda,
                    grad_clip: self.config.grad_clip,
                    entropy_coef,
                    explore,
                    critic_passes: self.config.critic_passes,
                    comm,
                };
                actor_critic_update(
                    &mut self.policy,
                    self.critic.as_mut().expect("critic present"),
                    &mut self.policy_opt,
                    self.critic_opt.as_mut().expect("critic optimizer present"),
                    &batch,
                    &settings,
                )
            }
            Algorithm::IqlComm => {
                batch.validate()?;
                for e in &batch.episodes {
                    self.replay.push(e.clone());
                }
                let sample = self.replay.sample(&mut self.rng, self.config.batch_size)?;
                q_learning_update(
                    &mut self.policy,
                    self.target.as_ref().expect("target network present"),
                    &mut self.policy_opt,
                    &sample,
                    self.config.gamma,
                    self.config.grad_clip,
                    comm,
                )
            }
        };
        match result {
            Ok(stats) => {
                self.updates += 1;
                if self.config.algo == Algorithm::IqlComm
                    && self.updates.is_multiple_of(self.config.target_sync as u64)
                {
                    self.target = Some(self.policy.clone());
                }
                self.last = Some(stats);
                Ok(stats)
            }
            Err(e) => {
                if matches!(e, Error::Numerical(_)) {
                    self.failed_batch = Some(batch);
                }
                Err(e)
            }
        }
    }

    pub fn train_iteration(&mut self) -> Result<UpdateStats> {
        let batch = self.collect()?;
        self.learn(batch)
    }

    /// Greedy evaluation on the configured number of episodes.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalMetrics> {
        evaluate_greedy(
            &self.policy,
            &self.env,
            episodes,
            self.config.seed,
            self.step,
            self.comm_mode(),
        )
    }

    pub fn metrics_record(&self, metrics: &EvalMetrics, wall_ms: u64) -> MetricsRecord {
        MetricsRecord {
            step: self.step,
            algo: self.config.algo.to_string(),
            env: self.env.name().to_string(),
            mode: self.env.mode(),
            success_rate: metrics.success_rate,
            mean_return: metrics.mean_return,
            actor_loss: self.last.and_then(|s| s.actor_loss),
            critic_loss: self.last.map(|s| s.critic_loss),
            wall_ms,
        }
    }

    /// Trains until `total_steps`, evaluating every `eval_period` steps.
    ///
    /// With `out` set, metrics, checkpoint and manifest are written there;
    /// `config_text` is the effective configuration echoed into the manifest.
    pub fn run(
        &mut self,
        out: Option<&Path>,
        config_text: &str,
        on_record: &mut dyn FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>> {
        let start = Instant::now();
        let mut metrics_file = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                self.write_manifest(dir, config_text)?;
                Some(File::create(dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        let period = self.config.eval_period;
        let mut next_eval = if period == 0 { u64::MAX } else { (self.step / period + 1) * period };
        let mut next_ckpt = match self.config.checkpoint_period {
            0 => u64::MAX,
            p => (self.step / p + 1) * p,
        };
        let mut records = Vec::new();
        while self.step < self.config.total_steps {
            if let Err(e) = self.train_iteration() {
                if let (Some(dir), Some(batch)) = (out, &self.failed_batch) {
                    dump_batch(&dir.join(NAN_DUMP_FILE), batch)?;
                }
                return Err(e);
            }
            while self.step >= next_eval {
                let m = self.evaluate(self.config.eval_episodes)?;
                let wall = if self.config.record_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                };
                let rec = self.metrics_record(&m, wall);
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                    f.flush()?;
                }
                on_record(&rec);
                records.push(rec);
                next_eval += period;
            }
            if self.step >= next_ckpt {
                if let Some(dir) = out {
                    self.save(dir, config_text)?;
                }
                next_ckpt += self.config.checkpoint_period;
            }
        }
        if let Some(dir) = out {
            self.save(dir, config_text)?;
        }
        Ok(records)
    }

    /// Every tensor needed to resume training, with role prefixes.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.policy.params.prefixed("policy.");
        let opt = |prefix: &str, params: &ParamSet<T>, o: &RmsProp<T>| -> Vec<(String, Tensor<T>)> {
            params
                .names()
                .iter()
                .zip(o.square_avg())
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
                .collect()
        };
        out.extend(opt("opt.policy.", &self.policy.params, &self.policy_opt));
        if let (Some(c), Some(o)) = (&self.critic, &self.critic_opt) {
            out.extend(c.params.prefixed("critic."));
            out.extend(opt("opt.critic.", &c.params, o));
        }
        if let Some(t) = &self.target {
            out.extend(t.params.prefixed("target."));
        }
        out
    }

    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        self.policy.params.load_from(&strip(entries, "policy."))?;
        self.policy_opt
            .load_square_avg(ordered(&strip(entries, "opt.policy."), &self.policy.params)?)?;
        if let (Some(c), Some(o)) = (self.critic.as_mut(), self.critic_opt.as_mut()) {
            c.params.load_from(&strip(entries, "critic."))?;
            o.load_square_avg(ordered(&strip(entries, "opt.critic."), &c.params)?)?;
        }
        if let Some(t) = self.target.as_mut() {
            t.params.load_from(&strip(entries, "target."))?;
        }
        Ok(())
    }

    pub fn manifest(&self, config_text: &str) -> Manifest {
        Manifest {
            config: config_text.to_string(),
            config_hash: config_hash(config_text),
            algo: self.config.algo,
            env: self.env.name().into(),
            mode: self.env.mode(),
            step: self.step,
            step_unit: STEP_UNIT.into(),
            updates: self.updates,
            rng_state: RngState {
                rollout: self.rng.clone(),
                env_seeds: self.env_rng.clone(),
            },
            checkpoint: CHECKPOINT_FILE.into(),
        }
    }

    fn write_manifest(&self, dir: &Path, config_text: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest(config_text))?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Writes checkpoint and manifest into `dir`.
    pub fn save(&self, dir: &Path, config_text: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.checkpoint_entries())?;
        self.write_manifest(dir, config_text)
    }

    /// Restores parameters, optimizer state, counters and RNG streams.
    ///
    /// The replay store of the value-based baseline is not persisted.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let entries = checkpoint::load_as::<T>(&dir.join(&manifest.checkpoint))?;
        self.load_entries(&entries)?;
        self.step = manifest.step;
        self.updates = manifest.updates;
        self.rng = manifest.rng_state.rollout;
        self.env_rng = manifest.rng_state.env_seeds;
        Ok(())
    }
}

fn strip<T: Scalar>(entries: &[(String, Tensor<T>)], prefix: &str) -> Vec<(String, Tensor<T>)> {
    entries
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn ordered<T: Scalar>(entries: &[(String, Tensor<T>)], params: &ParamSet<T>) -> Result<Vec<Tensor<T>>> {
    params
        .names()
        .iter()
        .map(|n| {
            entries
                .iter()
                .find(|(m, _)| m == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {n}")))
        })
        .collect()
}

/// Rebuilds the actor from a checkpoint written by [`Trainer::save`].
pub fn policy_from_entries<T: Scalar>(
    config: PolicyConfig,
    entries: &[(String, Tensor<T>)],
) -> Result<CommPolicy<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = CommPolicy::new(config, &mut rng)?;
    policy.params.load_from(&strip(entries, "policy."))?;
    Ok(policy)
}

#[derive(Serialize)]
struct DumpedEpisode {
    seed: u64,
    rewards: Vec<f64>,
    actions: Vec<Vec<Option<usize>>>,
}

fn dump_batch(path: &PathBuf, batch: &EpisodeBatch) -> Result<()> {
    let eps: Vec<DumpedEpisode> = batch
        .episodes
        .iter()
        .map(|e| DumpedEpisode {
            seed: e.seed,
            rewards: e.transitions.iter().map(|t| t.reward).collect(),
            actions: e.transitions.iter().map(|t| t.actions.clone()).collect(),
        })
        .collect();
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    f.write_all(serde_json::to_string(&eps)?.as_bytes())?;
    Ok(())
}
