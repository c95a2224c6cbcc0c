//! Decentralized communicating actor.
//!
//! Observations are encoded per agent, mixed across the communication graph
//! by stacked multi-head dot-product attention convolutions, fed through a
//! GRU cell and read out as a distribution over actions. Every agent shares
//! the same parameters; the adjacency mask decides who hears whom.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var, MASK_FILL};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub readout: Readout,
}

/// What the recurrent cell reads from the communication stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Output of the last convolution layer only.
    Last,
    /// Encoder output and every convolution output, concatenated.
    #[default]
    Concat,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "concat" => Ok(Readout::Concat),
            other => Err(Error::Config(format!("unknown readout {other:?}"))),
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::Concat => "concat",
        })
    }
}

impl PolicyConfig {
    pub fn new(obs_dim: usize, n_actions: usize) -> Self {
        PolicyConfig {
            obs_dim,
            n_actions,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 8,
            head_dim: 16,
            hidden_dim: 64,
            readout: Readout::Concat,
        }
    }

    /// Width of the recurrent cell's input.
    pub fn readout_dim(&self) -> usize {
        match self.readout {
            Readout::Last => self.embed_dim,
            Readout::Concat => self.embed_dim * (self.n_layers + 1),
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.obs_dim,
            self.n_actions,
            self.embed_dim,
            self.n_heads,
            self.head_dim,
            self.hidden_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("policy dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Binary communication graph `A + I` over `n` agent slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMask {
    n: usize,
    edges: Vec<bool>,
    pub timestep: usize,
}

impl AdjacencyMask {
    pub fn identity(n: usize) -> Self {
        let mut edges = vec![false; n * n];
        (0..n).for_each(|i| edges[i * n + i] = true);
        AdjacencyMask {
            n,
            edges,
            timestep: 0,
        }
    }

    pub fn full(n: usize) -> Self {
        AdjacencyMask {
            n,
            edges: vec![true; n * n],
            timestep: 0,
        }
    }

    /// Builds `A + I` from an adjacency predicate.
    pub fn from_fn(n: usize, timestep: usize, connected: impl Fn(usize, usize) -> bool) -> Self {
        let mut edges = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                edges[i * n + j] = i == j || connected(i, j);
            }
        }
        AdjacencyMask {
            n,
            edges,
            timestep,
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut edges = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidTensor(format!("adjacency row {i} has length {}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 if i == j => {
                        return Err(Error::InvalidTensor(format!("adjacency diagonal {i} is 0")))
                    }
                    0 => edges.push(false),
                    1 => edges.push(true),
                    _ => return Err(Error::InvalidTensor(format!("adjacency entry {v} not binary"))),
                }
            }
        }
        Ok(AdjacencyMask {
            n,
            edges,
            timestep: 0,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j]
    }

    /// Cuts every edge touching `slot` except its self-loop.
    pub fn isolate(&mut self, slot: usize) {
        for k in 0..self.n {
            if k != slot {
                self.edges[slot * self.n + k] = false;
                self.edges[k * self.n + slot] = false;
            }
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .edges
            .iter()
            .map(|&e| if e { T::one() } else { T::zero() })
            .collect();
        Tensor::matrix(self.n, self.n, data).expect("square mask")
    }

    /// Block-diagonal mask over several graphs restricted to chosen slots.
    /// Agents of different graphs never see each other. At least one slot
    /// must be selected overall.
    pub fn block_diagonal<T: Scalar>(blocks: &[(&AdjacencyMask, &[usize])]) -> Tensor<T> {
        let total: usize = blocks.iter().map(|(_, s)| s.len()).sum();
        let mut data = vec![T::zero(); total * total];
        let mut offset = 0;
        for (mask, slots) in blocks {
            for (a, &i) in slots.iter().enumerate() {
                for (b, &j) in slots.iter().enumerate() {
                    if mask.get(i, j) {
                        data[(offset + a) * total + offset + b] = T::one();
                    }
                }
            }
            offset += slots.len();
        }
        Tensor::matrix(total, total, data).expect("at least one selected slot")
    }
}

/// Categorical distribution over one agent's actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(ActionDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }

    /// Argmax; the lowest index wins ties.
    pub fn greedy(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    mix: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_w: usize,
    enc_b: usize,
    layers: Vec<LayerIdx>,
    gru_wx: usize,
    gru_wh: usize,
    gru_bx: usize,
    gru_bh: usize,
    head_w: usize,
    head_b: usize,
}

/// Parameters of the communicating actor.
///
/// Per layer the query/key/value projections of all heads are stored side by
/// side: head `h` owns columns `h*head_dim..(h+1)*head_dim`. GRU gates are
/// stacked in the order reset, update, candidate.
#[derive(Clone, Debug)]
pub struct CommPolicy<T> {
    pub config: PolicyConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

/// Tape handles for every parameter of a [`CommPolicy`].
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub vars: Vec<Var>,
}

/// One batched forward step.
pub struct StepOutput {
    /// Log-probabilities (or raw action values for value-based heads are in `logits`).
    pub log_probs: Var,
    pub logits: Var,
    pub hidden: Var,
    /// Output of the last convolution layer: what each agent broadcasts.
    pub messages: Var,
}

impl<T: Scalar> CommPolicy<T> {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let width = c.n_heads * c.head_dim;
        let mut params = ParamSet::new();
        let enc_w = params.push("encoder.w", Tensor::glorot(rng, c.obs_dim, c.embed_dim));
        let enc_b = params.push("encoder.b", Tensor::zeros(&[c.embed_dim]));
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            layers.push(LayerIdx {
                wq: params.push(format!("conv{l}.wq"), Tensor::glorot(rng, c.embed_dim, width)),
                wk: params.push(format!("conv{l}.wk"), Tensor::glorot(rng, c.embed_dim, width)),
                wv: params.push(format!("conv{l}.wv"), Tensor::glorot(rng, c.embed_dim, width)),
                mix: params.push(format!("conv{l}.mix"), Tensor::glorot(rng, width, c.embed_dim)),
            });
        }
        let h = c.hidden_dim;
        let gru_wx = params.push("gru.wx", Tensor::glorot(rng, c.readout_dim(), 3 * h));
        let gru_wh = params.push("gru.wh", Tensor::glorot(rng, h, 3 * h));
        let gru_bx = params.push("gru.bx", Tensor::zeros(&[3 * h]));
        let gru_bh = params.push("gru.bh", Tensor::zeros(&[3 * h]));
        let mut head = Tensor::glorot(rng, h, c.n_actions);
        head.data_mut().iter_mut().for_each(|w| *w = *w * T::lit(0.1));
        let head_w = params.push("head.w", head);
        let head_b = params.push("head.b", Tensor::zeros(&[c.n_actions]));
        Ok(CommPolicy {
            config,
            params,
            layout: Layout {
                enc_w,
                enc_b,
                layers,
                gru_wx,
                gru_wh,
                gru_bx,
                gru_bh,
                head_w,
                head_b,
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundPolicy {
        BoundPolicy {
            vars: self.params.bind(tape, trainable),
        }
    }

    pub fn zero_hidden(&self, tape: &mut Tape<T>, rows: usize) -> Var {
        tape.constant(Tensor::zeros(&[rows.max(1), self.config.hidden_dim]))
    }

    /// `relu(obs W + b)`; one row per agent.
    pub fn encode(&self, tape: &mut Tape<T>, p: &BoundPolicy, obs: Var) -> Result<Var> {
        let (_, d) = tape.value(obs).shape2()?;
        if d != self.config.obs_dim {
            return Err(Error::Shape {
                op: "encode_observations",
                lhs: vec![d],
                rhs: vec![self.config.obs_dim],
            });
        }
        let z = tape.matmul(obs, p.vars[self.layout.enc_w])?;
        let z = tape.add_bias(z, p.vars[self.layout.enc_b])?;
        Ok(tape.relu(z))
    }

    /// Per-head attention weights of `layer`, each `rows x rows`.
    pub fn attention_weights(
        &self,
        tape: &mut Tape<T>,
        p: &BoundPolicy,
        layer: usize,
        h: Var,
        mask: &Tensor<T>,
    ) -> Result<Vec<Var>> {
        let idx = &self.layout.layers[layer];
        let q = tape.matmul(h, p.vars[idx.wq])?;
        let k = tape.matmul(h, p.vars[idx.wk])?;
        let scale = T::lit(1.0 / (self.config.head_dim as f64).sqrt());
        (0..self.config.n_heads)
            .map(|head| {
                let (lo, hi) = (head * self.config.head_dim, (head + 1) * self.config.head_dim);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let logits = tape.scale(logits, scale);
                tape.masked_row_softmax(logits, mask, T::lit(MASK_FILL))
            })
            .collect()
    }

    /// One hop of attention-weighted aggregation followed by head mixing and ReLU.
    pub fn graph_conv(
        &self,
        tape: &mut Tape<T>,
        p: &BoundPolicy,
        layer: usize,
        h: Var,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let alphas = self.attention_weights(tape, p, layer, h, mask)?;
        let idx = &self.layout.layers[layer];
        let v = tape.matmul(h, p.vars[idx.wv])?;
        let mut heads = Vec::with_capacity(alphas.len());
        for (head, alpha) in alphas.into_iter().enumerate() {
            let (lo, hi) = (head * self.config.head_dim, (head + 1) * self.config.head_dim);
            let vh = tape.slice_cols(v, lo, hi)?;
            heads.push(tape.matmul(alpha, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, Axis::Cols)?
        };
        let mixed = tape.matmul(cat, p.vars[idx.mix])?;
        Ok(tape.relu(mixed))
    }

    /// Encoder output followed by the output of each convolution layer.
    pub fn communicate(
        &self,
        tape: &mut Tape<T>,
        p: &BoundPolicy,
        obs: Var,
        mask: &Tensor<T>,
    ) -> Result<Vec<Var>> {
        let mut stack = vec![self.encode(tape, p, obs)?];
        for layer in 0..self.config.n_layers {
            let h = self.graph_conv(tape, p, layer, stack[layer], mask)?;
            stack.push(h);
        }
        Ok(stack)
    }

    /// Recurrent-cell input assembled from the communication stack.
    pub fn readout(&self, tape: &mut Tape<T>, stack: &[Var]) -> Result<Var> {
        match self.config.readout {
            Readout::Concat if stack.len() > 1 => tape.concat(stack, Axis::Cols),
            _ => Ok(*stack.last().expect("stack holds the encoder output")),
        }
    }

    /// GRU cell.
    pub fn recurrent(&self, tape: &mut Tape<T>, p: &BoundPolicy, x: Var, h_prev: Var) -> Result<Var> {
        let hd = self.config.hidden_dim;
        let l = &self.layout;
        let gx = tape.matmul(x, p.vars[l.gru_wx])?;
        let gx = tape.add_bias(gx, p.vars[l.gru_bx])?;
        let gh = tape.matmul(h_prev, p.vars[l.gru_wh])?;
        let gh = tape.add_bias(gh, p.vars[l.gru_bh])?;
        let gate = |tape: &mut Tape<T>, g: Var, i: usize| tape.slice_cols(g, i * hd, (i + 1) * hd);
        let (xr, xz, xn) = (gate(tape, gx, 0)?, gate(tape, gx, 1)?, gate(tape, gx, 2)?);
        let (hr, hz, hn) = (gate(tape, gh, 0)?, gate(tape, gh, 1)?, gate(tape, gh, 2)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h_prev, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn head_logits(&self, tape: &mut Tape<T>, p: &BoundPolicy, hidden: Var) -> Result<Var> {
        let y = tape.matmul(hidden, p.vars[self.layout.head_w])?;
        tape.add_bias(y, p.vars[self.layout.head_b])
    }

    /// Recurrent readout plus availability-masked log-softmax.
    pub fn policy_forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundPolicy,
        features: Var,
        h_prev: Var,
        available: &Tensor<T>,
    ) -> Result<(Var, Var, Var)> {
        let hidden = self.recurrent(tape, p, features, h_prev)?;
        let logits = self.head_logits(tape, p, hidden)?;
        let log_probs = tape
            .masked_log_softmax(logits, available, T::lit(MASK_FILL))
            .map_err(|e| match e {
                Error::AllMasked { row } => {
                    Error::Distribution(format!("agent row {row} has no available action"))
                }
                other => other,
            })?;
        Ok((log_probs, logits, hidden))
    }

    /// Full step: encode, communicate, recur, read out.
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        p: &BoundPolicy,
        obs: Var,
        mask: &Tensor<T>,
        h_prev: Var,
        available: &Tensor<T>,
    ) -> Result<StepOutput> {
        let stack = self.communicate(tape, p, obs, mask)?;
        let messages = *stack.last().expect("stack holds the encoder output");
        let features = self.readout(tape, &stack)?;
        let (log_probs, logits, hidden) = self.policy_forward(tape, p, features, h_prev, available)?;
        Ok(StepOutput {
            log_probs,
            logits,
            hidden,
            messages,
        })
    }

    /// Distributions from a log-probability matrix, one per row.
    pub fn distributions(tape: &Tape<T>, log_probs: Var) -> Result<Vec<ActionDistribution>> {
        let lp = tape.value(log_probs);
        let (m, _) = lp.shape2()?;
        (0..m)
            .map(|i| {
                let probs: Vec<f64> = lp.row(i).iter().map(|v| v.to_f64().unwrap().exp()).collect();
                let total: f64 = probs.iter().sum();
                ActionDistribution::new(probs.iter().map(|p| p / total).collect())
            })
            .collect()
    }
}
