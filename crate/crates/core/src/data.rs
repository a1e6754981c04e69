//! Logged transition datasets: collection under noise mixtures, binary
//! persistence and uniform minibatch sampling.
//!
//! On-disk layout (all integers u64 little-endian, all floats f32 little-endian):
//!
//! ```text
//! magic        8 bytes  "BRACDS1\0"
//! env name     u64 length + UTF-8 bytes
//! state_dim    u64
//! action_dim   u64
//! count        u64
//! noise tag    u64 length + UTF-8 bytes
//! records      count × (s[state_dim], a[action_dim], r, s'[state_dim], done:u8)
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_str, put_u64, read_all, write_atomic, Reader};
use crate::envs::{ActionSelector, EnvName, Environment, UniformRandom};
use crate::error::{BracError, Result};
use crate::rng::BracRng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"BRACDS1\0";

/// One transition, upcast to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// A minibatch as column tensors; `rewards` and `dones` are `[batch, 1]`,
/// `dones` holding 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub dones: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Columnar store of transitions at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    env: String,
    noise_tag: String,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    dones: Vec<bool>,
}

impl OfflineDataset {
    pub fn new(env: &str, noise_tag: &str, state_dim: usize, action_dim: usize) -> Self {
        Self {
            env: env.to_owned(),
            noise_tag: noise_tag.to_owned(),
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn env_name(&self) -> &str {
        &self.env
    }

    pub fn env(&self) -> Result<EnvName> {
        self.env.parse()
    }

    pub fn noise_tag(&self) -> &str {
        &self.noise_tag
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(
        &mut self,
        state: &[f64],
        action: &[f64],
        reward: f64,
        next_state: &[f64],
        done: bool,
    ) -> Result<()> {
        if state.len() != self.state_dim
            || next_state.len() != self.state_dim
            || action.len() != self.action_dim
        {
            return Err(BracError::Config(format!(
                "transition dimensions ({}, {}, {}) do not match dataset ({}, {})",
                state.len(),
                action.len(),
                next_state.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        self.states.extend(state.iter().map(|&x| x as f32));
        self.actions.extend(action.iter().map(|&x| x as f32));
        self.rewards.push(reward as f32);
        self.next_states.extend(next_state.iter().map(|&x| x as f32));
        self.dones.push(done);
        Ok(())
    }

    pub fn transition(&self, i: usize) -> Transition {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let up = |xs: &[f32]| xs.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
        Transition {
            state: up(&self.states[i * sd..(i + 1) * sd]),
            action: up(&self.actions[i * ad..(i + 1) * ad]),
            reward: f64::from(self.rewards[i]),
            next_state: up(&self.next_states[i * sd..(i + 1) * sd]),
            done: self.dones[i],
        }
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let cols = |src: &[f32], w: usize| {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend(src[i * w..(i + 1) * w].iter().map(|&x| f64::from(x)));
            }
            Tensor::from_vec(idx.len(), w, out)
        };
        Batch {
            states: cols(&self.states, sd),
            actions: cols(&self.actions, ad),
            rewards: Tensor::from_vec(
                idx.len(),
                1,
                idx.iter().map(|&i| f64::from(self.rewards[i])).collect(),
            ),
            next_states: cols(&self.next_states, sd),
            dones: Tensor::from_vec(
                idx.len(),
                1,
                idx.iter().map(|&i| if self.dones[i] { 1.0 } else { 0.0 }).collect(),
            ),
        }
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut BracRng) -> Result<Batch> {
        if self.is_empty() {
            return Err(BracError::Contract("cannot sample from an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > self.len() {
            return Err(BracError::Contract(format!(
                "batch size {batch_size} must be in 1..={}",
                self.len()
            )));
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..self.len())).collect();
        Ok(self.gather(&idx))
    }

    /// Every state in the dataset as one `[count, state_dim]` tensor.
    pub fn all_states(&self) -> Tensor {
        Tensor::from_vec(
            self.len(),
            self.state_dim,
            self.states.iter().map(|&x| f64::from(x)).collect(),
        )
    }

    /// Mean undiscounted return over the episodes that ran to completion.
    /// Falls back to the per-step mean scaled by `horizon` when no episode
    /// completed.
    pub fn average_episode_return(&self, horizon: usize) -> f64 {
        let (mut total, mut episodes, mut running) = (0.0, 0usize, 0.0);
        for (r, &d) in self.rewards.iter().zip(&self.dones) {
            running += f64::from(*r);
            if d {
                total += running;
                episodes += 1;
                running = 0.0;
            }
        }
        if episodes > 0 {
            total / episodes as f64
        } else {
            let mean = self.rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / self.len().max(1) as f64;
            mean * horizon as f64
        }
    }

    pub fn record_size(state_dim: usize, action_dim: usize) -> usize {
        4 * (2 * state_dim + action_dim + 1) + 1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            64 + self.env.len() + self.noise_tag.len()
                + self.len() * Self::record_size(self.state_dim, self.action_dim),
        );
        out.extend_from_slice(DATASET_MAGIC);
        // Writing into a Vec cannot fail.
        put_str(&mut out, &self.env).expect("vec write");
        put_u64(&mut out, self.state_dim as u64).expect("vec write");
        put_u64(&mut out, self.action_dim as u64).expect("vec write");
        put_u64(&mut out, self.len() as u64).expect("vec write");
        put_str(&mut out, &self.noise_tag).expect("vec write");
        let (sd, ad) = (self.state_dim, self.action_dim);
        for i in 0..self.len() {
            let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            put(&self.states[i * sd..(i + 1) * sd]);
            put(&self.actions[i * ad..(i + 1) * ad]);
            put(&self.rewards[i..i + 1]);
            put(&self.next_states[i * sd..(i + 1) * sd]);
            out.push(u8::from(self.dones[i]));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(DATASET_MAGIC)?;
        let env = r.string("env name")?;
        let state_dim = r.usize("state_dim")?;
        let action_dim = r.usize("action_dim")?;
        let count = r.usize("count")?;
        let noise_tag = r.string("noise tag")?;
        if state_dim == 0 || action_dim == 0 {
            return Err(r.err("state and action dimensions must be positive"));
        }
        if let Ok(name) = env.parse::<EnvName>() {
            let e = name.build();
            if e.state_dim() != state_dim || e.action_dim() != action_dim {
                return Err(r.err(format!(
                    "dimensions ({state_dim}, {action_dim}) do not match environment {env}"
                )));
            }
        }
        let expected = count
            .checked_mul(Self::record_size(state_dim, action_dim))
            .ok_or_else(|| r.err("record count overflows"))?;
        let remaining = r.remaining();
        if remaining != expected {
            return Err(r.err(format!(
                "body holds {remaining} bytes, header declares {count} records of {} bytes",
                Self::record_size(state_dim, action_dim)
            )));
        }
        let mut ds = Self::new(&env, &noise_tag, state_dim, action_dim);
        ds.states.reserve(count * state_dim);
        ds.next_states.reserve(count * state_dim);
        ds.actions.reserve(count * action_dim);
        for _ in 0..count {
            for _ in 0..state_dim {
                ds.states.push(r.f32()?);
            }
            for _ in 0..action_dim {
                ds.actions.push(r.f32()?);
            }
            ds.rewards.push(r.f32()?);
            for _ in 0..state_dim {
                ds.next_states.push(r.f32()?);
            }
            ds.dones.push(match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(r.err(format!("done flag must be 0 or 1, got {other}"))),
            });
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?, path)
    }
}

/// How the behavior policy's actions are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    NoNoise,
    /// With probability `p` per step take a uniform random action.
    Eps(f64),
    /// Add independent `N(0, σ²)` noise to every action dimension.
    Gauss(f64),
}

/// Segment fractions (noisy, clean, random walk) for noisy datasets.
pub const NOISY_MIXTURE: [f64; 3] = [0.4, 0.4, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
}

impl NoiseConfig {
    pub fn new(kind: NoiseKind) -> Result<Self> {
        match kind {
            NoiseKind::Eps(p) if !(0.0..=1.0).contains(&p) => {
                Err(BracError::Config(format!("epsilon must lie in [0, 1], got {p}")))
            }
            NoiseKind::Gauss(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(BracError::Config(format!("noise scale must be >= 0, got {s}")))
            }
            _ => Ok(Self { kind }),
        }
    }

    /// The five dataset variants: no-noise, eps-0.1, eps-0.3, gauss-0.1, gauss-0.3.
    pub fn standard_variants() -> Vec<NoiseConfig> {
        [
            NoiseKind::NoNoise,
            NoiseKind::Eps(0.1),
            NoiseKind::Eps(0.3),
            NoiseKind::Gauss(0.1),
            NoiseKind::Gauss(0.3),
        ]
        .into_iter()
        .map(|kind| NoiseConfig { kind })
        .collect()
    }

    /// Fractions (noisy, clean, random walk).
    pub fn mixture(&self) -> [f64; 3] {
        match self.kind {
            NoiseKind::NoNoise => [0.0, 1.0, 0.0],
            _ => NOISY_MIXTURE,
        }
    }

    /// Transition counts per segment for a dataset of `n` transitions.
    pub fn segment_counts(&self, n: usize) -> [usize; 3] {
        let [noisy, clean, _] = self.mixture();
        let a = (noisy * n as f64).round() as usize;
        let b = ((clean * n as f64).round() as usize).min(n - a);
        [a, b, n - a - b]
    }

    /// Short label used in file names, e.g. `eps-0.1`.
    pub fn label(&self) -> String {
        match self.kind {
            NoiseKind::NoNoise => "no-noise".into(),
            NoiseKind::Eps(p) => format!("eps-{p}"),
            NoiseKind::Gauss(s) => format!("gauss-{s}"),
        }
    }
}

impl fmt::Display for NoiseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::NoNoise => f.write_str("none"),
            NoiseKind::Eps(p) => write!(f, "eps:{p}"),
            NoiseKind::Gauss(s) => write!(f, "gauss:{s}"),
        }
    }
}

impl FromStr for NoiseConfig {
    type Err = BracError;

    /// Accepts `none`, `eps:P`, `gauss:S` and the labels `no-noise`,
    /// `eps-P`, `gauss-S`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || BracError::Config(format!("bad noise spec {s:?} (none | eps:P | gauss:S)"));
        if s == "none" || s == "no-noise" {
            return NoiseConfig::new(NoiseKind::NoNoise);
        }
        let (kind, value) = s.split_once([':', '-']).ok_or_else(bad)?;
        let value: f64 = value.parse().map_err(|_| bad())?;
        match kind {
            "eps" => NoiseConfig::new(NoiseKind::Eps(value)),
            "gauss" => NoiseConfig::new(NoiseKind::Gauss(value)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Segment {
    Noisy,
    Clean,
    RandomWalk,
}

/// Rolls whole episodes until `n` transitions are logged. Noisy kinds fill
/// the (noisy, clean, random walk) segments in that order; each segment's
/// last episode is truncated at its quota.
pub fn collect(
    env: &dyn Environment,
    base_policy: &dyn ActionSelector,
    noise: NoiseConfig,
    n: usize,
    rng: &mut BracRng,
) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(BracError::Config("dataset size must be at least 1".into()));
    }
    let mut ds = OfflineDataset::new(
        env.name().as_str(),
        &noise.to_string(),
        env.state_dim(),
        env.action_dim(),
    );
    let [noisy, clean, random] = noise.segment_counts(n);
    let uniform = UniformRandom::for_env(env);
    for (segment, quota) in [
        (Segment::Noisy, noisy),
        (Segment::Clean, clean),
        (Segment::RandomWalk, random),
    ] {
        let mut logged = 0;
        while logged < quota {
            let mut state = env.reset(rng.gen());
            for t in 0..env.horizon() {
                if logged == quota {
                    break;
                }
                let action = match segment {
                    Segment::RandomWalk => uniform.draw(rng),
                    Segment::Clean => policy_action(base_policy, &state, rng),
                    Segment::Noisy => {
                        let base = policy_action(base_policy, &state, rng);
                        perturb(env, &uniform, noise.kind, base, rng)
                    }
                };
                let (next, reward) = env.dynamics(&state, &action);
                ds.push(&state, &action, reward, &next, t + 1 == env.horizon())?;
                state = next;
                logged += 1;
            }
        }
    }
    Ok(ds)
}

fn policy_action(policy: &dyn ActionSelector, state: &[f64], rng: &mut BracRng) -> Vec<f64> {
    let s = Tensor::from_vec(1, state.len(), state.to_vec());
    policy.select(&s, rng).into_data()
}

fn perturb(
    env: &dyn Environment,
    uniform: &UniformRandom,
    kind: NoiseKind,
    action: Vec<f64>,
    rng: &mut BracRng,
) -> Vec<f64> {
    match kind {
        NoiseKind::NoNoise => action,
        NoiseKind::Eps(p) => {
            if rng.gen::<f64>() < p {
                uniform.draw(rng)
            } else {
                action
            }
        }
        NoiseKind::Gauss(sigma) => {
            let noisy: Vec<f64> = if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("valid sigma");
                action.iter().map(|a| a + normal.sample(rng)).collect()
            } else {
                action
            };
            env.clip_action(&noisy)
        }
    }
}
