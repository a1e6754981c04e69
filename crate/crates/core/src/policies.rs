//! Tanh-squashed Gaussian policies and behavior cloning.
//!
//! The trunk maps a state to `[mean, log_std]` per action dimension. An
//! action is `scale · tanh(u) + shift` with `u = mean + exp(log_std) · z`.
//! Batched sampling lays rows out state-major: draw `j` for state `i` is row
//! `i * n + j`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64, put_u64, read_all, write_atomic, Reader};
use crate::data::OfflineDataset;
use crate::envs::ActionSelector;
use crate::error::{BracError, Result};
use crate::nn::{Mlp, MlpVars};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{standard_normal, BracRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const POLICY_MAGIC: &[u8; 8] = b"BRACPOL1";
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Fraction of the action range by which boundary actions are pulled inward.
pub const BOUNDARY_MARGIN: f64 = 1e-6;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq)]
pub struct TanhGaussianPolicy {
    trunk: Mlp,
    low: Vec<f64>,
    high: Vec<f64>,
    log_std_range: (f64, f64),
}

/// Tape handles for a batch of reparameterized draws.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    /// `[batch * n, act_dim]`, state-major.
    pub actions: Var,
    /// Pre-squash values, same layout as `actions`, clamped so that actions
    /// stay `BOUNDARY_MARGIN · range` inside the bounds.
    pub pre_tanh: Var,
    /// `[batch * n, 1]`
    pub log_probs: Var,
    /// Distribution parameters repeated per draw, `[batch * n, act_dim]`.
    pub mean: Var,
    pub log_std: Var,
}

/// Untracked draws: `actions` is `[batch * n, act_dim]` state-major,
/// `log_probs` is `[batch, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub actions: Tensor,
    pub log_probs: Tensor,
}

/// `log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`, stable for large |u|.
fn log_tanh_jacobian(tape: &mut Tape, u: Var) -> Var {
    let m2u = tape.scale(u, -2.0);
    let sp = tape.softplus(m2u);
    let s = tape.add(u, sp);
    let s = tape.neg(s);
    let s = tape.add_scalar(s, std::f64::consts::LN_2);
    tape.scale(s, 2.0)
}

impl TanhGaussianPolicy {
    /// Randomly initialised policy with the given hidden layer widths.
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        low: Vec<f64>,
        high: Vec<f64>,
        rng: &mut BracRng,
    ) -> Result<Self> {
        let sizes = Self::trunk_sizes(state_dim, hidden, low.len());
        Self::from_trunk(Mlp::new(&sizes, rng)?, low, high)
    }

    /// Policy ignoring the state: every state maps to the same pre-squash
    /// Gaussian `N(mean, exp(log_std)^2)`.
    pub fn constant(
        state_dim: usize,
        hidden: &[usize],
        low: Vec<f64>,
        high: Vec<f64>,
        mean: &[f64],
        log_std: &[f64],
    ) -> Result<Self> {
        let ad = low.len();
        if mean.len() != ad || log_std.len() != ad {
            return Err(BracError::Config("mean/log_std width must match action bounds".into()));
        }
        let mut trunk = Mlp::zeros(&Self::trunk_sizes(state_dim, hidden, ad))?;
        let bias = trunk.output_bias_mut().data_mut();
        bias[..ad].copy_from_slice(mean);
        bias[ad..].copy_from_slice(log_std);
        Self::from_trunk(trunk, low, high)
    }

    pub fn from_trunk(trunk: Mlp, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() || low.iter().zip(&high).any(|(l, h)| !(l < h))
        {
            return Err(BracError::Config(format!("bad action bounds {low:?} / {high:?}")));
        }
        if trunk.output_dim() != 2 * low.len() {
            return Err(BracError::Config(format!(
                "trunk outputs {} values, need {}",
                trunk.output_dim(),
                2 * low.len()
            )));
        }
        Ok(Self {
            trunk,
            low,
            high,
            log_std_range: (LOG_STD_MIN, LOG_STD_MAX),
        })
    }

    pub fn trunk_sizes(state_dim: usize, hidden: &[usize], action_dim: usize) -> Vec<usize> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        sizes
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    pub fn action_low(&self) -> &[f64] {
        &self.low
    }

    pub fn action_high(&self) -> &[f64] {
        &self.high
    }

    pub fn log_std_range(&self) -> (f64, f64) {
        self.log_std_range
    }

    fn scale(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    fn shift(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h + l)).collect()
    }

    fn log_scale_sum(&self) -> f64 {
        self.scale().iter().map(|s| s.ln()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.trunk.bind(tape, trainable)
    }

    /// `(mean, log_std)`, each `[batch, act_dim]`, with `log_std` clamped.
    pub fn dist_tape(&self, tape: &mut Tape, vars: &MlpVars, states: Var) -> Result<(Var, Var)> {
        let ad = self.action_dim();
        let out = self.trunk.forward_tape(tape, vars, states)?;
        let mean = tape.slice_cols(out, 0, ad);
        let log_std = tape.slice_cols(out, ad, 2 * ad);
        let log_std = tape.clamp(log_std, self.log_std_range.0, self.log_std_range.1);
        Ok((mean, log_std))
    }

    /// Per-row Gaussian log-density of pre-squash values `u` (summed over
    /// action dimensions), `[rows, 1]`. `mean` and `log_std` share `u`'s shape.
    pub fn gaussian_log_density(tape: &mut Tape, u: Var, mean: Var, log_std: Var) -> Var {
        let d = tape.sub(u, mean);
        let inv = tape.neg(log_std);
        let inv = tape.exp(inv);
        let z = tape.mul(d, inv);
        let z2 = tape.square(z);
        let t = tape.scale(z2, -0.5);
        let t = tape.sub(t, log_std);
        let t = tape.add_scalar(t, -HALF_LOG_TWO_PI);
        tape.sum_cols(t)
    }

    /// Reparameterized draws with noise `z` of shape `[batch * n, act_dim]`.
    pub fn sample_tape_with_noise(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: Var,
        n: usize,
        z: Tensor,
    ) -> Result<SampleVars> {
        let (batch, _) = tape.shape(states);
        let ad = self.action_dim();
        if n == 0 || z.rows() != batch * n || z.cols() != ad {
            return Err(BracError::Contract(format!(
                "noise must be [{} x {ad}] for {n} draws per state",
                batch * n
            )));
        }
        let (mean, log_std) = self.dist_tape(tape, vars, states)?;
        let mean = tape.repeat_rows(mean, n);
        let log_std = tape.repeat_rows(log_std, n);
        let z = tape.constant(z);
        let std = tape.exp(log_std);
        let noise = tape.mul(std, z);
        let u = tape.add(mean, noise);
        let u_max = (1.0 - 2.0 * BOUNDARY_MARGIN).atanh();
        let u = tape.clamp(u, -u_max, u_max);
        let y = tape.tanh(u);
        let scale = tape.constant(Tensor::from_vec(1, ad, self.scale()));
        let shift = tape.constant(Tensor::from_vec(1, ad, self.shift()));
        let a = tape.mul_row(y, scale);
        let actions = tape.add_row(a, shift);

        let base = Self::gaussian_log_density(tape, u, mean, log_std);
        let jac = log_tanh_jacobian(tape, u);
        let jac = tape.sum_cols(jac);
        let lp = tape.sub(base, jac);
        let log_probs = tape.add_scalar(lp, -self.log_scale_sum());
        Ok(SampleVars {
            actions,
            pre_tanh: u,
            log_probs,
            mean,
            log_std,
        })
    }

    pub fn sample_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: Var,
        n: usize,
        rng: &mut BracRng,
    ) -> Result<SampleVars> {
        let batch = tape.shape(states).0;
        let z = standard_normal(batch * n, self.action_dim(), rng);
        self.sample_tape_with_noise(tape, vars, states, n, z)
    }

    pub fn sample(&self, states: &Tensor, n: usize, rng: &mut BracRng) -> Result<PolicySample> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let out = self.sample_tape(&mut tape, &vars, s, n, rng)?;
        Ok(PolicySample {
            actions: tape.value(out.actions).clone(),
            log_probs: tape.value(out.log_probs).clone().reshape(vec![states.rows(), n])?,
        })
    }

    /// Pulls actions at least `BOUNDARY_MARGIN · range` inside the bounds.
    pub fn clip_inward(&self, actions: &Tensor) -> Tensor {
        let ad = self.action_dim();
        let mut out = actions.clone();
        for (i, a) in out.data_mut().iter_mut().enumerate() {
            let (l, h) = (self.low[i % ad], self.high[i % ad]);
            let m = BOUNDARY_MARGIN * (h - l);
            *a = a.clamp(l + m, h - m);
        }
        out
    }

    /// Recorded exact log-density of fixed `actions`, `[batch, 1]`.
    /// Gradients flow into the policy parameters.
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: Var,
        actions: &Tensor,
    ) -> Result<Var> {
        let ad = self.action_dim();
        if actions.cols() != ad || actions.rows() != tape.shape(states).0 {
            return Err(BracError::Contract(format!(
                "actions must be [{} x {ad}], got {:?}",
                tape.shape(states).0,
                actions.shape()
            )));
        }
        let (scale, shift) = (self.scale(), self.shift());
        let mut u = Vec::with_capacity(actions.numel());
        let mut jac = Vec::with_capacity(actions.rows());
        for row in actions.data().chunks(ad) {
            let mut acc = 0.0;
            for (j, &a) in row.iter().enumerate() {
                if !(a > self.low[j] && a < self.high[j]) {
                    return Err(BracError::Contract(format!(
                        "action {a} is not strictly inside ({}, {})",
                        self.low[j], self.high[j]
                    )));
                }
                let y = (a - shift[j]) / scale[j];
                u.push(y.atanh());
                acc += (1.0 - y * y).ln();
            }
            jac.push(acc);
        }
        let rows = actions.rows();
        let u = tape.constant(Tensor::from_vec(rows, ad, u));
        let (mean, log_std) = self.dist_tape(tape, vars, states)?;
        let base = Self::gaussian_log_density(tape, u, mean, log_std);
        let jac = tape.constant(Tensor::from_vec(rows, 1, jac));
        let lp = tape.sub(base, jac);
        Ok(tape.add_scalar(lp, -self.log_scale_sum()))
    }

    /// Exact log-density `[batch, 1]`; actions must be strictly inside bounds.
    pub fn log_prob(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let lp = self.log_prob_tape(&mut tape, &vars, s, actions)?;
        Ok(tape.value(lp).clone())
    }

    /// `scale · tanh(mean) + shift`.
    pub fn mean_action(&self, states: &Tensor) -> Result<Tensor> {
        let out = self.trunk.forward(states)?;
        let ad = self.action_dim();
        let (scale, shift) = (self.scale(), self.shift());
        let data = out
            .data()
            .chunks(2 * ad)
            .flat_map(|r| (0..ad).map(|j| scale[j] * r[j].tanh() + shift[j]).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::from_vec(states.rows(), ad, data))
    }

    /// Clamped `exp(log_std)`, `[batch, act_dim]`.
    pub fn std_dev(&self, states: &Tensor) -> Result<Tensor> {
        let out = self.trunk.forward(states)?;
        let ad = self.action_dim();
        let (lo, hi) = self.log_std_range;
        let data = out
            .data()
            .chunks(2 * ad)
            .flat_map(|r| r[ad..].iter().map(|v| v.clamp(lo, hi).exp()).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::from_vec(states.rows(), ad, data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        let sizes = self.trunk.layer_sizes();
        put_u64(&mut out, sizes.len() as u64).expect("vec write");
        for &s in sizes {
            put_u64(&mut out, s as u64).expect("vec write");
        }
        for &v in self.low.iter().chain(&self.high) {
            put_f64(&mut out, v).expect("vec write");
        }
        put_f64(&mut out, self.log_std_range.0).expect("vec write");
        put_f64(&mut out, self.log_std_range.1).expect("vec write");
        let flat = self.trunk.flat_params();
        put_u64(&mut out, flat.len() as u64).expect("vec write");
        for v in flat {
            put_f64(&mut out, v).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(POLICY_MAGIC)?;
        let n_sizes = r.usize("layer count")?;
        let sizes = (0..n_sizes)
            .map(|_| r.usize("layer size"))
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 || sizes.last().copied().unwrap_or(0) % 2 != 0 {
            return Err(r.err(format!("bad policy layer sizes {sizes:?}")));
        }
        let ad = sizes[sizes.len() - 1] / 2;
        let low = (0..ad).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let high = (0..ad).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let range = (r.f64()?, r.f64()?);
        let count = r.usize("parameter count")?;
        if count != Mlp::param_count(&sizes) {
            return Err(r.err(format!(
                "parameter count {count} does not match layer sizes {sizes:?}"
            )));
        }
        let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let trunk = Mlp::from_flat(&sizes, &flat).map_err(|e| r.err(e.to_string()))?;
        let mut policy = Self::from_trunk(trunk, low, high).map_err(|e| r.err(e.to_string()))?;
        policy.log_std_range = range;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?, path)
    }
}

/// One stochastic action per state.
impl ActionSelector for TanhGaussianPolicy {
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor {
        self.sample(states, 1, rng).expect("policy matches environment").actions
    }
}

/// Deterministic `scale · tanh(mean) + shift` actions.
pub struct MeanAction<'a>(pub &'a TanhGaussianPolicy);

impl ActionSelector for MeanAction<'_> {
    fn select(&self, states: &Tensor, _rng: &mut BracRng) -> Tensor {
        self.0.mean_action(states).expect("policy matches environment")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            hidden: vec![200, 200],
        }
    }
}

impl CloneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(BracError::Config(
                "clone steps, batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of behavior cloning.
#[derive(Clone, Debug)]
pub struct ClonedBehavior {
    pub policy: TanhGaussianPolicy,
    /// Mean log-likelihood of the whole dataset under the final policy.
    pub log_likelihood: f64,
    /// Minibatch mean log-likelihood before each step.
    pub trace: Vec<f64>,
}

/// Mean log-likelihood of every dataset transition, evaluated in chunks.
pub fn dataset_log_likelihood(policy: &TanhGaussianPolicy, ds: &OfflineDataset) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(4096) {
        let b = ds.gather(chunk);
        let lp = policy.log_prob(&b.states, &policy.clip_inward(&b.actions))?;
        total += lp.sum();
    }
    Ok(total / ds.len() as f64)
}

/// Max-likelihood fit of a tanh-Gaussian policy to the dataset actions.
pub fn clone_behavior(
    ds: &OfflineDataset,
    cfg: &CloneConfig,
    rng: &mut BracRng,
) -> Result<ClonedBehavior> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(BracError::Config("cannot clone from an empty dataset".into()));
    }
    let env = ds.env()?.build();
    let mut policy = TanhGaussianPolicy::new(
        ds.state_dim(),
        &cfg.hidden,
        env.action_low(),
        env.action_high(),
        rng,
    )?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), policy.trunk.params());
    let batch_size = cfg.batch_size.min(ds.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = ds.sample_batch(batch_size, rng)?;
        let mut tape = Tape::new();
        let vars = policy.bind(&mut tape, true);
        let s = tape.constant(batch.states);
        let lp = policy.log_prob_tape(&mut tape, &vars, s, &policy.clip_inward(&batch.actions))?;
        let ll = tape.mean(lp);
        let loss = tape.neg(ll);
        let value = tape.value(ll).item();
        if !value.is_finite() {
            return Err(BracError::training("clone_behavior", step as u64, "non-finite likelihood"));
        }
        trace.push(value);
        let grads = vars.grads(&tape.backward(loss)?);
        adam.step(policy.trunk.params_mut(), &grads)
            .map_err(|e| relabel(e, "clone_behavior", step as u64))?;
    }
    let log_likelihood = dataset_log_likelihood(&policy, ds)?;
    Ok(ClonedBehavior {
        policy,
        log_likelihood,
        trace,
    })
}

/// Renames the op and step of a training error raised by a helper.
pub(crate) fn relabel(e: BracError, op: &str, step: u64) -> BracError {
    match e {
        BracError::Training { detail, .. } => BracError::training(op, step, detail),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OfflineDataset;
    use crate::rng::seeded;
    use rand::Rng;

    fn one_d(mean: f64, log_std: f64, low: f64, high: f64) -> TanhGaussianPolicy {
        TanhGaussianPolicy::constant(1, &[4], vec![low], vec![high], &[mean], &[log_std]).unwrap()
    }

    fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        (-0.5 * ((x - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Independent density of a squashed Gaussian on [low, high].
    fn squashed_pdf(a: f64, mu: f64, sigma: f64, low: f64, high: f64) -> f64 {
        let (scale, shift) = (0.5 * (high - low), 0.5 * (high + low));
        let y = (a - shift) / scale;
        normal_pdf(y.atanh(), mu, sigma) / (scale * (1.0 - y * y))
    }

    #[test]
    fn zero_noise_draw_at_zero_mean_gives_gaussian_peak() {
        let p = one_d(0.0, 0.0, -1.0, 1.0);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let s = tape.constant(Tensor::zeros(1, 1));
        let out = p.sample_tape_with_noise(&mut tape, &vars, s, 1, Tensor::zeros(1, 1)).unwrap();
        assert_eq!(tape.value(out.actions).item(), 0.0);
        assert!((tape.value(out.log_probs).item() + HALF_LOG_TWO_PI).abs() < 1e-15);
    }

    #[test]
    fn closed_form_log_prob_at_zero() {
        let p = one_d(0.0, 0.0, -1.0, 1.0);
        let lp = p.log_prob(&Tensor::zeros(1, 1), &Tensor::zeros(1, 1)).unwrap().item();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let wide = one_d(0.0, 0.0, -2.0, 2.0);
        let lp = wide.log_prob(&Tensor::zeros(1, 1), &Tensor::zeros(1, 1)).unwrap().item();
        assert!((lp - (-0.918_938_533_204_672_7 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_strictly_inside_bounds() {
        let p = one_d(0.5, 1.5, -2.0, 2.0);
        let s = Tensor::zeros(1000, 1);
        let mut rng = seeded(3);
        for _ in 0..100 {
            let out = p.sample(&s, 1, &mut rng).unwrap();
            assert!(out.actions.data().iter().all(|&a| a > -2.0 && a < 2.0));
        }
    }

    #[test]
    fn sampled_log_prob_matches_log_prob() {
        let mut rng = seeded(11);
        let p = TanhGaussianPolicy::new(3, &[16, 16], vec![-1.0, -2.0], vec![1.0, 0.5], &mut rng).unwrap();
        let states = standard_normal(5, 3, &mut rng);
        let out = p.sample(&states, 4, &mut rng).unwrap();
        let repeated = states.repeat_rows(4);
        let lp = p.log_prob(&repeated, &out.actions).unwrap();
        for (x, y) in lp.data().iter().zip(out.log_probs.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn boundary_actions_are_rejected() {
        let p = one_d(0.0, 0.0, -1.0, 1.0);
        let s = Tensor::zeros(1, 1);
        assert!(matches!(
            p.log_prob(&s, &Tensor::scalar(1.0)),
            Err(BracError::Contract(_))
        ));
        let inward = p.clip_inward(&Tensor::scalar(1.0));
        assert!(p.log_prob(&s, &inward).unwrap().item().is_finite());
    }

    #[test]
    fn log_prob_agrees_with_independent_density() {
        let p = one_d(0.3, -0.4, -2.0, 3.0);
        let s = Tensor::zeros(1, 1);
        for a in [-1.9, -0.5, 0.0, 0.7, 1.2, 2.95] {
            let lp = p.log_prob(&s, &Tensor::scalar(a)).unwrap().item();
            let oracle = squashed_pdf(a, 0.3, (-0.4f64).exp(), -2.0, 3.0).ln();
            assert!((lp - oracle).abs() < 1e-10, "a={a}: {lp} vs {oracle}");
        }
    }

    #[test]
    fn density_peaks_near_squashed_mean_for_narrow_policies() {
        // For small σ the mode of the squashed density sits within O(σ²) of
        // scale·tanh(μ) + shift.
        let (mu, low, high) = (0.4, -1.0, 3.0);
        let p = one_d(mu, -3.0, low, high);
        let s = Tensor::zeros(1, 1);
        let step = 1e-3;
        let grid: Vec<f64> = (1..4000).map(|i| low + i as f64 * step).collect();
        let lps: Vec<f64> = grid
            .iter()
            .map(|&a| p.log_prob(&s, &Tensor::scalar(a)).unwrap().item())
            .collect();
        let best = lps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let target = 2.0 * mu.tanh() + 1.0;
        assert!((grid[best] - target).abs() < 0.02, "{} vs {target}", grid[best]);
        // increasing before, decreasing after
        assert!(lps[..best].windows(2).all(|w| w[0] <= w[1]));
        assert!(lps[best..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn monte_carlo_histogram_matches_density() {
        let (mu, log_std) = (0.3, -0.7);
        let p = one_d(mu, log_std, -1.0, 1.0);
        let mut rng = seeded(5);
        let n = 1_000_000;
        let out = p.sample(&Tensor::zeros(n, 1), 1, &mut rng).unwrap();
        let bins = 40;
        let width = 2.0 / bins as f64;
        let mut counts = vec![0usize; bins];
        for &a in out.actions.data() {
            counts[(((a + 1.0) / width) as usize).min(bins - 1)] += 1;
        }
        let sigma = log_std.exp();
        let mut checked = 0;
        for (b, &c) in counts.iter().enumerate() {
            if c < 10_000 {
                continue;
            }
            let lo = -1.0 + b as f64 * width;
            // midpoint-rule average density over the bin
            let avg: f64 = (0..50)
                .map(|k| squashed_pdf(lo + (k as f64 + 0.5) * width / 50.0, mu, sigma, -1.0, 1.0))
                .sum::<f64>()
                / 50.0;
            let empirical = c as f64 / (n as f64 * width);
            assert!((empirical / avg - 1.0).abs() < 0.05, "bin {b}: {empirical} vs {avg}");
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn log_prob_is_invariant_to_clamp_inside_range() {
        let mut p = one_d(0.2, -1.0, -1.0, 1.0);
        let s = Tensor::zeros(1, 1);
        let a = Tensor::scalar(0.1);
        let before = p.log_prob(&s, &a).unwrap().item();
        p.log_std_range = (-3.0, 0.0);
        assert_eq!(p.log_prob(&s, &a).unwrap().item(), before);
    }

    #[test]
    fn reparameterized_gradient_matches_finite_differences() {
        // Objective: mean over draws of Q(s, a) = -Σ (a - c)², fixed noise.
        let mut rng = seeded(21);
        let mut p = TanhGaussianPolicy::new(2, &[6], vec![-1.0, -1.0], vec![1.0, 1.0], &mut rng).unwrap();
        let states = standard_normal(3, 2, &mut rng);
        let z = standard_normal(3 * 4, 2, &mut rng);
        let c = [0.3, -0.6];
        let objective = |p: &TanhGaussianPolicy, tape: &mut Tape, vars: &MlpVars| {
            let s = tape.constant(states.clone());
            let out = p.sample_tape_with_noise(tape, vars, s, 4, z.clone()).unwrap();
            let target = tape.constant(Tensor::from_vec(1, 2, c.to_vec()));
            let neg_target = tape.scale(target, -1.0);
            let d = tape.add_row(out.actions, neg_target);
            let sq = tape.square(d);
            let q = tape.sum_cols(sq);
            let q = tape.neg(q);
            tape.mean(q)
        };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let f = objective(&p, &mut tape, &vars);
        let grads = vars.grads(&tape.backward(f).unwrap());
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let flat = p.trunk.flat_params();
        let h = 1e-6;
        let eval = |p: &TanhGaussianPolicy| {
            let mut t = Tape::new();
            let v = p.bind(&mut t, false);
            let f = objective(p, &mut t, &v);
            t.value(f).item()
        };
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            p.trunk.set_flat_params(&plus).unwrap();
            let fp = eval(&p);
            let mut minus = flat.clone();
            minus[i] -= h;
            p.trunk.set_flat_params(&minus).unwrap();
            let fm = eval(&p);
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!((analytic[i] - fd).abs() / denom < 1e-3, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(2);
        let p = TanhGaussianPolicy::new(4, &[8, 8], vec![-1.0, -1.0], vec![1.0, 1.0], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pol");
        p.save(&path).unwrap();
        assert_eq!(TanhGaussianPolicy::load(&path).unwrap(), p);
        let mut bytes = p.to_bytes();
        bytes.pop();
        assert!(TanhGaussianPolicy::from_bytes(&bytes, &path).is_err());
    }

    fn constant_action_dataset(n: usize, action: f64, rng: &mut BracRng) -> OfflineDataset {
        let mut ds = OfflineDataset::new("pointmass2d", "none", 4, 2);
        for _ in 0..n {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ds.push(&s, &[action, action], -1.0, &s, false).unwrap();
        }
        ds
    }

    #[test]
    fn cloning_constant_actions_recovers_them() {
        let mut rng = seeded(4);
        let ds = constant_action_dataset(500, 0.3, &mut rng);
        let cfg = CloneConfig {
            steps: 600,
            batch_size: 64,
            learning_rate: 3e-3,
            hidden: vec![32, 32],
        };
        let cloned = clone_behavior(&ds, &cfg, &mut rng).unwrap();
        let held_out = crate::rng::standard_normal(50, 4, &mut rng).map(|x| x.clamp(-1.0, 1.0));
        let mean = cloned.policy.mean_action(&held_out).unwrap();
        for &m in mean.data() {
            assert!((m - 0.3).abs() < 0.05, "mean action {m}");
        }
    }

    #[test]
    fn single_transition_likelihood_increases() {
        let mut rng = seeded(6);
        let ds = constant_action_dataset(1, -0.45, &mut rng);
        let cfg = CloneConfig {
            steps: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            hidden: vec![16],
        };
        let cloned = clone_behavior(&ds, &cfg, &mut rng).unwrap();
        assert!(cloned.trace.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn cloning_recovers_generating_std() {
        // Actions from a squashed Gaussian with state-dependent mean and σ = 0.2.
        let mut rng = seeded(8);
        let mut ds = OfflineDataset::new("pointmass2d", "none", 4, 2);
        for _ in 0..4000 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2)
                .map(|j| (0.5 * s[j] + 0.2 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).tanh())
                .collect();
            ds.push(&s, &a, 0.0, &s, false).unwrap();
        }
        let cfg = CloneConfig {
            steps: 1500,
            batch_size: 128,
            learning_rate: 2e-3,
            hidden: vec![32, 32],
        };
        let cloned = clone_behavior(&ds, &cfg, &mut rng).unwrap();
        let states = ds.gather(&(0..500).collect::<Vec<_>>()).states;
        let std = cloned.policy.std_dev(&states).unwrap().mean();
        assert!((0.1..=0.4).contains(&std), "std {std}");
        assert!(cloned.log_likelihood.is_finite());
    }

    #[test]
    fn cloning_is_deterministic() {
        let ds = constant_action_dataset(50, 0.1, &mut seeded(1));
        let cfg = CloneConfig {
            steps: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            hidden: vec![8],
        };
        let a = clone_behavior(&ds, &cfg, &mut seeded(9)).unwrap();
        let b = clone_behavior(&ds, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.trace, b.trace);
    }
}
