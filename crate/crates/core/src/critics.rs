//! Q-function ensembles with soft-updated targets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64, put_u64, read_all, write_atomic, Reader};
use crate::data::Batch;
use crate::error::{BracError, Result};
use crate::nn::{Mlp, MlpVars};
use crate::optim::{soft_update, Adam, AdamConfig};
use crate::policies::relabel;
use crate::rng::BracRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CRITIC_MAGIC: &[u8; 8] = b"BRACQEN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerMode {
    Min,
    Weighted,
}

/// Reduces k target values per row to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetCombiner {
    pub mode: CombinerMode,
    /// Weight on the minimum in `Weighted` mode.
    pub lambda: f64,
}

impl TargetCombiner {
    pub fn min() -> Self {
        Self {
            mode: CombinerMode::Min,
            lambda: 1.0,
        }
    }

    pub fn weighted(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(BracError::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(Self {
            mode: CombinerMode::Weighted,
            lambda,
        })
    }

    pub fn combine_row(&self, row: &[f64]) -> f64 {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        match self.mode {
            CombinerMode::Min => lo,
            CombinerMode::Weighted => {
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                self.lambda * lo + (1.0 - self.lambda) * hi
            }
        }
    }

    /// `[batch, k] -> [batch, 1]`.
    pub fn combine(&self, values: &Tensor) -> Result<Tensor> {
        if values.cols() == 0 {
            return Err(BracError::Contract("cannot combine zero ensemble members".into()));
        }
        let data = values.data().chunks(values.cols()).map(|r| self.combine_row(r)).collect();
        Ok(Tensor::from_vec(values.rows(), 1, data))
    }
}

impl Default for TargetCombiner {
    fn default() -> Self {
        Self::min()
    }
}

/// `k` source networks on `concat(state, action)` and their target copies.
#[derive(Clone, Debug, PartialEq)]
pub struct QEnsemble {
    sources: Vec<Mlp>,
    targets: Vec<Mlp>,
    tau: f64,
}

impl QEnsemble {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        k: usize,
        tau: f64,
        rng: &mut BracRng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(BracError::Config("ensemble size k must be at least 1".into()));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let sources = (0..k).map(|_| Mlp::new(&sizes, rng)).collect::<Result<Vec<_>>>()?;
        Self::from_sources(sources, tau)
    }

    /// Targets start as exact copies of `sources`.
    pub fn from_sources(sources: Vec<Mlp>, tau: f64) -> Result<Self> {
        if sources.is_empty() {
            return Err(BracError::Config("ensemble size k must be at least 1".into()));
        }
        if sources.iter().any(|m| m.layer_sizes() != sources[0].layer_sizes() || m.output_dim() != 1) {
            return Err(BracError::Config("ensemble members need identical scalar-output shapes".into()));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(BracError::Config(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(Self {
            targets: sources.clone(),
            sources,
            tau,
        })
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn input_dim(&self) -> usize {
        self.sources[0].input_dim()
    }

    pub fn sources(&self) -> &[Mlp] {
        &self.sources
    }

    pub fn sources_mut(&mut self) -> &mut [Mlp] {
        &mut self.sources
    }

    pub fn targets(&self) -> &[Mlp] {
        &self.targets
    }

    fn nets(&self, which: Which) -> &[Mlp] {
        match which {
            Which::Source => &self.sources,
            Which::Target => &self.targets,
        }
    }

    /// Per-member values `[batch, k]`.
    pub fn q_values(&self, states: &Tensor, actions: &Tensor, which: Which) -> Result<Tensor> {
        if states.rows() != actions.rows() {
            return Err(BracError::Config(format!(
                "{} states but {} actions",
                states.rows(),
                actions.rows()
            )));
        }
        let sa = states.concat_cols(actions);
        let k = self.k();
        let mut out = vec![0.0; sa.rows() * k];
        for (j, net) in self.nets(which).iter().enumerate() {
            let q = net.forward(&sa)?;
            for (i, v) in q.data().iter().enumerate() {
                out[i * k + j] = *v;
            }
        }
        Ok(Tensor::from_vec(sa.rows(), k, out))
    }

    pub fn bind_sources(&self, tape: &mut Tape, trainable: bool) -> Vec<MlpVars> {
        self.sources.iter().map(|m| m.bind(tape, trainable)).collect()
    }

    /// Recorded per-member source values `[batch, k]` for `sa = concat(s, a)`.
    pub fn q_values_tape(&self, tape: &mut Tape, vars: &[MlpVars], sa: Var) -> Result<Var> {
        let mut out: Option<Var> = None;
        for (net, v) in self.sources.iter().zip(vars) {
            let q = net.forward_tape(tape, v, sa)?;
            out = Some(match out {
                None => q,
                Some(acc) => tape.concat_cols(acc, q),
            });
        }
        Ok(out.expect("k >= 1"))
    }

    /// Recorded rowwise minimum over source members, `[batch, 1]`.
    pub fn min_q_tape(&self, tape: &mut Tape, vars: &[MlpVars], sa: Var) -> Result<Var> {
        let q = self.q_values_tape(tape, vars, sa)?;
        Ok(if self.k() == 1 { q } else { tape.min_cols(q) })
    }

    pub fn new_optimizers(&self, cfg: AdamConfig) -> Vec<Adam> {
        self.sources.iter().map(|m| Adam::new(cfg, m.params())).collect()
    }

    /// Regresses every source member onto `targets` with one Adam step each,
    /// then soft-updates the targets. Returns the mean over members of the
    /// squared TD error.
    pub fn fit_step(
        &mut self,
        adams: &mut [Adam],
        states: &Tensor,
        actions: &Tensor,
        targets: &Tensor,
        step: u64,
    ) -> Result<f64> {
        if adams.len() != self.k() {
            return Err(BracError::Config("one optimizer per ensemble member".into()));
        }
        let sa = states.concat_cols(actions);
        let mut total = 0.0;
        for (net, adam) in self.sources.iter_mut().zip(adams.iter_mut()) {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape, true);
            let x = tape.constant(sa.clone());
            let q = net.forward_tape(&mut tape, &vars, x)?;
            let y = tape.constant(targets.clone());
            let d = tape.sub(q, y);
            let sq = tape.square(d);
            let loss = tape.mean(sq);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(BracError::training("critic_update", step, "non-finite TD loss"));
            }
            total += value;
            let grads = vars.grads(&tape.backward(loss)?);
            adam.step(net.params_mut(), &grads)
                .map_err(|e| relabel(e, "critic_update", step))?;
        }
        self.update_targets()?;
        Ok(total / self.k() as f64)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        for (t, s) in self.targets.iter_mut().zip(&self.sources) {
            soft_update(t.params_mut(), s.params(), self.tau)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CRITIC_MAGIC);
        put_u64(&mut out, self.k() as u64).expect("vec write");
        let sizes = self.sources[0].layer_sizes();
        put_u64(&mut out, sizes.len() as u64).expect("vec write");
        for &s in sizes {
            put_u64(&mut out, s as u64).expect("vec write");
        }
        put_f64(&mut out, self.tau).expect("vec write");
        for net in self.sources.iter().chain(&self.targets) {
            for v in net.flat_params() {
                put_f64(&mut out, v).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(CRITIC_MAGIC)?;
        let k = r.usize("ensemble size")?;
        let n_sizes = r.usize("layer count")?;
        let sizes = (0..n_sizes)
            .map(|_| r.usize("layer size"))
            .collect::<Result<Vec<_>>>()?;
        if k == 0 || sizes.len() < 2 || sizes[sizes.len() - 1] != 1 || sizes.contains(&0) {
            return Err(r.err(format!("bad critic header k={k} sizes={sizes:?}")));
        }
        let tau = r.f64()?;
        let count = Mlp::param_count(&sizes);
        let read_net = |r: &mut Reader<'_>| -> Result<Mlp> {
            let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Mlp::from_flat(&sizes, &flat)
        };
        let sources = (0..k).map(|_| read_net(&mut r)).collect::<Result<Vec<_>>>()?;
        let targets = (0..k).map(|_| read_net(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut ens = Self::from_sources(sources, tau).map_err(|e| r.err(e.to_string()))?;
        ens.targets = targets;
        Ok(ens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?, path)
    }
}

/// Bellman target `[batch, 1]`: `r` at terminal rows, otherwise
/// `r + γ (combine(target Q(s′, a′)) − α · penalty)`.
pub fn td_target(
    ens: &QEnsemble,
    combiner: &TargetCombiner,
    batch: &Batch,
    next_actions: &Tensor,
    penalty: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let q_next = ens.q_values(&batch.next_states, next_actions, Which::Target)?;
    let q_bar = combiner.combine(&q_next)?;
    td_target_from_values(&q_bar, &batch.rewards, &batch.dones, penalty, alpha, gamma)
}

/// [`td_target`] on precomputed combined target values.
pub fn td_target_from_values(
    q_bar: &Tensor,
    rewards: &Tensor,
    dones: &Tensor,
    penalty: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let n = rewards.rows();
    if q_bar.numel() != n || dones.numel() != n || penalty.numel() != n {
        return Err(BracError::Contract("td_target inputs must share the batch size".into()));
    }
    let data = (0..n)
        .map(|i| {
            let r = rewards.data()[i];
            if dones.data()[i] != 0.0 {
                r
            } else {
                r + gamma * (q_bar.data()[i] - alpha * penalty.data()[i])
            }
        })
        .collect();
    Ok(Tensor::from_vec(n, 1, data))
}
