//! Run configuration files.
//!
//! Flat `key = value` lines grouped under `[env]`, `[model]`, `[train]` and
//! `[eval]`. `#` starts a comment. Unknown or inapplicable keys are errors.
//! Values not given fall back to the defaults of the chosen environment and
//! algorithm. [`RunSettings::to_text`] writes every effective value back in
//! the same format.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::str::FromStr;

use crate::env::manufacture::ManufactureConfig;
use crate::env::traffic::{TrafficConfig, TrafficMode};
use crate::error::{Error, Result};
use crate::train::{EnvChoice, TrainConfig};

pub const SECTIONS: [&str; 4] = ["env", "model", "train", "eval"];

const TRAFFIC_KEYS: [&str; 5] = ["n_max", "p_arrive", "r_coll", "r_time", "horizon"];
const MANUFACTURE_KEYS: [&str; 14] = [
    "p_product",
    "n_product",
    "c_op",
    "c_stop",
    "c_maint",
    "c_broke",
    "mean_pre_mature",
    "mean_mature",
    "mean_slightly_worn",
    "maintenance_mean",
    "gamma_scale",
    "horizon",
    "wear_while_stopped",
    "curriculum",
];
const MODEL_KEYS: [&str; 7] = [
    "embed_dim",
    "n_layers",
    "n_heads",
    "head_dim",
    "hidden_dim",
    "readout",
    "critic_hidden",
];
const TRAIN_KEYS: [&str; 23] = [
    "algo",
    "seed",
    "total_steps",
    "batch_size",
    "gamma",
    "lambda",
    "lr",
    "alpha",
    "eps",
    "grad_clip",
    "entropy_coef",
    "entropy_anneal_steps",
    "explore_start",
    "explore_end",
    "explore_anneal_steps",
    "critic_passes",
    "replay_capacity",
    "target_sync",
    "epsilon_start",
    "epsilon_end",
    "epsilon_anneal_steps",
    "checkpoint_period",
    "record_wall_time",
];
const EVAL_KEYS: [&str; 2] = ["period", "episodes"];

/// Raw key-value pairs as read from a file plus command-line overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

/// Fully resolved settings for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub env: EnvChoice,
    pub train: TrainConfig,
}

fn known(section: &str, key: &str) -> bool {
    match section {
        "env" => key == "name" || key == "mode" || TRAFFIC_KEYS.contains(&key) || MANUFACTURE_KEYS.contains(&key),
        "model" => MODEL_KEYS.contains(&key),
        "train" => TRAIN_KEYS.contains(&key),
        "eval" => EVAL_KEYS.contains(&key),
        _ => false,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err("key outside of a section".into()))?;
            let key = key.trim();
            if cfg.values.contains_key(&(sec.to_string(), key.to_string())) {
                return Err(err(format!("duplicate key {sec}.{key}")));
            }
            cfg.set(sec, key, value.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or overrides one value.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        if !known(section, key) {
            return Err(Error::Config(format!("unknown key {section}.{key}")));
        }
        self.values
            .insert((section.to_string(), key.to_string()), value.to_string());
        Ok(())
    }

    /// `traffic`, `traffic-hard`, `traffic:easy` or `manufacture`.
    pub fn set_env(&mut self, spec: &str) -> Result<()> {
        let (name, mode) = match spec.split_once(['-', ':']) {
            Some((n, m)) => (n, Some(m)),
            None => (spec, None),
        };
        self.set("env", "name", name)?;
        if let Some(m) = mode {
            self.set("env", "mode", m)?;
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    fn value<V: FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {section}.{key}"))),
        }
    }

    pub fn resolve(&self) -> Result<RunSettings> {
        let name = self.get("env", "name").unwrap_or("traffic");
        let env = match name {
            "traffic" => {
                if let Some(k) = MANUFACTURE_KEYS
                    .iter()
                    .find(|k| !TRAFFIC_KEYS.contains(k) && self.get("env", k).is_some())
                {
                    return Err(Error::Config(format!("env.{k} does not apply to traffic")));
                }
                let mode: TrafficMode = self.value("env", "mode", TrafficMode::Easy)?;
                let d = TrafficConfig::for_mode(mode);
                let c = TrafficConfig {
                    mode,
                    n_max: self.value("env", "n_max", d.n_max)?,
                    p_arrive: self.value("env", "p_arrive", d.p_arrive)?,
                    r_coll: self.value("env", "r_coll", d.r_coll)?,
                    r_time: self.value("env", "r_time", d.r_time)?,
                    horizon: self.value("env", "horizon", d.horizon)?,
                };
                c.validate()?;
                EnvChoice::Traffic(c)
            }
            "manufacture" => {
                let stray = TRAFFIC_KEYS
                    .iter()
                    .chain(["mode"].iter())
                    .find(|k| !MANUFACTURE_KEYS.contains(k) && self.get("env", k).is_some());
                if let Some(k) = stray {
                    return Err(Error::Config(format!("env.{k} does not apply to manufacture")));
                }
                let d = ManufactureConfig::default();
                let c = ManufactureConfig {
                    p_product: self.value("env", "p_product", d.p_product)?,
                    n_product: self.value("env", "n_product", d.n_product)?,
                    c_op: self.value("env", "c_op", d.c_op)?,
                    c_stop: self.value("env", "c_stop", d.c_stop)?,
                    c_maint: self.value("env", "c_maint", d.c_maint)?,
                    c_broke: self.value("env", "c_broke", d.c_broke)?,
                    state_means: [
                        self.value("env", "mean_pre_mature", d.state_means[0])?,
                        self.value("env", "mean_mature", d.state_means[1])?,
                        self.value("env", "mean_slightly_worn", d.state_means[2])?,
                    ],
                    maintenance_mean: self.value("env", "maintenance_mean", d.maintenance_mean)?,
                    gamma_scale: self.value("env", "gamma_scale", d.gamma_scale)?,
                    horizon: self.value("env", "horizon", d.horizon)?,
                    wear_while_stopped: self.value("env", "wear_while_stopped", d.wear_while_stopped)?,
                    curriculum: self.value("env", "curriculum", d.curriculum)?,
                };
                c.validate()?;
                EnvChoice::Manufacture(c)
            }
            other => return Err(Error::Config(format!("unknown environment {other}"))),
        };

        let d = TrainConfig::default();
        let train = TrainConfig {
            algo: self.value("train", "algo", d.algo)?,
            seed: self.value("train", "seed", d.seed)?,
            total_steps: self.value("train", "total_steps", d.total_steps)?,
            batch_size: self.value("train", "batch_size", d.batch_size)?,
            gamma: self.value("train", "gamma", d.gamma)?,
            lambda: self.value("train", "lambda", d.lambda)?,
            optimizer: crate::optim::RmsPropConfig {
                lr: self.value("train", "lr", d.optimizer.lr)?,
                alpha: self.value("train", "alpha", d.optimizer.alpha)?,
                eps: self.value("train", "eps", d.optimizer.eps)?,
            },
            grad_clip: self.value("train", "grad_clip", d.grad_clip)?,
            entropy_coef: self.value("train", "entropy_coef", d.entropy_coef)?,
            entropy_anneal_steps: self.value("train", "entropy_anneal_steps", d.entropy_anneal_steps)?,
            explore_start: self.value("train", "explore_start", d.explore_start)?,
            explore_end: self.value("train", "explore_end", d.explore_end)?,
            explore_anneal_steps: self.value("train", "explore_anneal_steps", d.explore_anneal_steps)?,
            critic_passes: self.value("train", "critic_passes", d.critic_passes)?,
            embed_dim: self.value("model", "embed_dim", d.embed_dim)?,
            n_layers: self.value("model", "n_layers", d.n_layers)?,
            n_heads: self.value("model", "n_heads", d.n_heads)?,
            head_dim: self.value("model", "head_dim", d.head_dim)?,
            hidden_dim: self.value("model", "hidden_dim", d.hidden_dim)?,
            readout: self.value("model", "readout", d.readout)?,
            critic_hidden: self.value("model", "critic_hidden", d.critic_hidden)?,
            replay_capacity: self.value("train", "replay_capacity", d.replay_capacity)?,
            target_sync: self.value("train", "target_sync", d.target_sync)?,
            epsilon_start: self.value("train", "epsilon_start", d.epsilon_start)?,
            epsilon_end: self.value("train", "epsilon_end", d.epsilon_end)?,
            epsilon_anneal_steps: self.value("train", "epsilon_anneal_steps", d.epsilon_anneal_steps)?,
            eval_period: self.value("eval", "period", d.eval_period)?,
            eval_episodes: self.value("eval", "episodes", d.eval_episodes)?,
            checkpoint_period: self.value("train", "checkpoint_period", d.checkpoint_period)?,
            record_wall_time: self.value("train", "record_wall_time", d.record_wall_time)?,
        };
        train.validate()?;
        Ok(RunSettings { env, train })
    }
}

impl RunSettings {
    /// Every effective value, in the configuration file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[env]\n");
        match &self.env {
            EnvChoice::Traffic(c) => {
                let _ = writeln!(s, "name = traffic");
                let _ = writeln!(s, "mode = {}", c.mode);
                let _ = writeln!(s, "n_max = {}", c.n_max);
                let _ = writeln!(s, "p_arrive = {}", c.p_arrive);
                let _ = writeln!(s, "r_coll = {}", c.r_coll);
                let _ = writeln!(s, "r_time = {}", c.r_time);
                let _ = writeln!(s, "horizon = {}", c.horizon);
            }
            EnvChoice::Manufacture(c) => {
                let _ = writeln!(s, "name = manufacture");
                let _ = writeln!(s, "p_product = {}", c.p_product);
                let _ = writeln!(s, "n_product = {}", c.n_product);
                let _ = writeln!(s, "c_op = {}", c.c_op);
                let _ = writeln!(s, "c_stop = {}", c.c_stop);
                let _ = writeln!(s, "c_maint = {}", c.c_maint);
                let _ = writeln!(s, "c_broke = {}", c.c_broke);
                let _ = writeln!(s, "mean_pre_mature = {}", c.state_means[0]);
                let _ = writeln!(s, "mean_mature = {}", c.state_means[1]);
                let _ = writeln!(s, "mean_slightly_worn = {}", c.state_means[2]);
                let _ = writeln!(s, "maintenance_mean = {}", c.maintenance_mean);
                let _ = writeln!(s, "gamma_scale = {}", c.gamma_scale);
                let _ = writeln!(s, "horizon = {}", c.horizon);
                let _ = writeln!(s, "wear_while_stopped = {}", c.wear_while_stopped);
                let _ = writeln!(s, "curriculum = {}", c.curriculum);
            }
        }
        let t = &self.train;
        let _ = write!(
            s,
            "\n[model]\nembed_dim = {}\nn_layers = {}\nn_heads = {}\nhead_dim = {}\nhidden_dim = {}\nreadout = {}\ncritic_hidden = {}\n",
            t.embed_dim,
            t.n_layers,
            t.n_heads,
            t.head_dim,
            t.hidden_dim,
            t.readout,
            t.critic_hidden
        );
        let _ = write!(
            s,
            "\n[train]\nalgo = {}\nseed = {}\ntotal_steps = {}\nbatch_size = {}\ngamma = {}\nlambda = {}\nlr = {}\nalpha = {}\neps = {}\ngrad_clip = {}\nentropy_coef = {}\nentropy_anneal_steps = {}\nexplore_start = {}\nexplore_end = {}\nexplore_anneal_steps = {}\ncritic_passes = {}\nreplay_capacity = {}\ntarget_sync = {}\nepsilon_start = {}\nepsilon_end = {}\nepsilon_anneal_steps = {}\ncheckpoint_period = {}\nrecord_wall_time = {}\n",
            t.algo,
            t.seed,
            t.total_steps,
            t.batch_size,
            t.gamma,
            t.lambda,
            t.optimizer.lr,
            t.optimizer.alpha,
            t.optimizer.eps,
            t.grad_clip,
            t.entropy_coef,
            t.entropy_anneal_steps,
            t.explore_start,
            t.explore_end,
            t.explore_anneal_steps,
            t.critic_passes,
            t.replay_capacity,
            t.target_sync,
            t.epsilon_start,
            t.epsilon_end,
            t.epsilon_anneal_steps,
            t.checkpoint_period,
            t.record_wall_time
        );
        let _ = write!(
            s,
            "\n[eval]\nperiod = {}\nepisodes = {}\n",
            t.eval_period, t.eval_episodes
        );
        s
    }
}
