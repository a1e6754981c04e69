//! Sample-based divergence estimates between the learned policy and the
//! cloned behavior policy, one value per state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BracError, Result};
use crate::nn::{Mlp, MlpVars};
use crate::optim::{Adam, AdamConfig};
use crate::policies::{relabel, SampleVars, TanhGaussianPolicy};
use crate::rng::BracRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MMD_SIGMA: f64 = 20.0;
pub const DEFAULT_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Mmd,
    KlPrimal,
    KlDual,
    Wasserstein,
    /// `log π(a|s)` of the single action sample already drawn by the caller.
    EntropySingleSample,
}

impl DivergenceKind {
    pub fn is_dual(self) -> bool {
        matches!(self, Self::KlDual | Self::Wasserstein)
    }
}

/// Biased squared MMD with the Laplacian kernel `exp(-‖x - y‖₁ / sigma)`.
/// `x` is `[n, d]`, `y` is `[m, d]`.
pub fn mmd_squared(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = mmd_tape(&mut tape, xv, yv, 1, sigma);
    tape.value(out).item()
}

/// Per-group squared MMD, `[groups, 1]`; `x` and `y` hold `groups`
/// consecutive blocks of rows each.
pub fn mmd_tape(tape: &mut Tape, x: Var, y: Var, groups: usize, sigma: f64) -> Var {
    let kxx = tape.laplace_kernel_mean(x, x, groups, sigma);
    let kxy = tape.laplace_kernel_mean(x, y, groups, sigma);
    let kyy = tape.laplace_kernel_mean(y, y, groups, sigma);
    let two_kxy = tape.scale(kxy, 2.0);
    let d = tape.sub(kxx, two_kxy);
    tape.add(d, kyy)
}

/// Per-state MMD between `n` draws from each policy. Gradients reach the
/// learned policy through `policy_sample`; behavior draws are constants.
pub fn estimate_mmd(
    tape: &mut Tape,
    policy_sample: &SampleVars,
    states: &Tensor,
    behavior: &TanhGaussianPolicy,
    n: usize,
    sigma: f64,
    rng: &mut BracRng,
) -> Result<Var> {
    let b = behavior.sample(states, n, rng)?;
    let bv = tape.constant(b.actions);
    Ok(mmd_tape(tape, policy_sample.actions, bv, states.rows(), sigma))
}

/// Per-state mean of `log π(a|s) − log π̂_b(a|s)` over the draws in
/// `policy_sample` (`n` per state). With shared action bounds the tanh
/// corrections cancel, so both densities are evaluated in pre-squash space.
pub fn estimate_kl_primal(
    tape: &mut Tape,
    policy_sample: &SampleVars,
    states: Var,
    behavior: &TanhGaussianPolicy,
    n: usize,
) -> Result<Var> {
    let batch = tape.shape(states).0;
    let bvars = behavior.bind(tape, false);
    let (bm, bls) = behavior.dist_tape(tape, &bvars, states)?;
    let bm = tape.repeat_rows(bm, n);
    let bls = tape.repeat_rows(bls, n);
    let u = policy_sample.pre_tanh;
    let lp = TanhGaussianPolicy::gaussian_log_density(tape, u, policy_sample.mean, policy_sample.log_std);
    let lb = TanhGaussianPolicy::gaussian_log_density(tape, u, bm, bls);
    let d = tape.sub(lp, lb);
    let d = tape.reshape(d, batch, n);
    Ok(tape.mean_cols(d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub inner_steps: usize,
    pub penalty_coef: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            hidden: vec![300, 300],
            learning_rate: 1e-4,
            inner_steps: 3,
            penalty_coef: 5.0,
        }
    }
}

const SLOPE_EPS: f64 = 1e-10;

/// Discriminator `g(s, a)` for the dual forms.
#[derive(Clone, Debug)]
pub struct DualEstimator {
    form: DivergenceKind,
    disc: Mlp,
    adam: Adam,
    cfg: DualConfig,
}

impl DualEstimator {
    pub fn new(
        form: DivergenceKind,
        state_dim: usize,
        action_dim: usize,
        cfg: DualConfig,
        rng: &mut BracRng,
    ) -> Result<Self> {
        if !form.is_dual() {
            return Err(BracError::Config(format!("{form:?} has no dual form")));
        }
        if cfg.penalty_coef < 0.0 || !(cfg.learning_rate > 0.0) {
            return Err(BracError::Config("dual penalty must be >= 0 and lr > 0".into()));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let disc = Mlp::new(&sizes, rng)?;
        Ok(Self::with_discriminator(form, disc, cfg))
    }

    pub fn with_discriminator(form: DivergenceKind, disc: Mlp, cfg: DualConfig) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), disc.params());
        Self {
            form,
            disc,
            adam,
            cfg,
        }
    }

    pub fn form(&self) -> DivergenceKind {
        self.form
    }

    pub fn config(&self) -> &DualConfig {
        &self.cfg
    }

    pub fn discriminator(&self) -> &Mlp {
        &self.disc
    }

    /// Raw discriminator output mapped into the conjugate's domain: for
    /// `kl_dual` this is `t = −exp(raw) < 0`, for Wasserstein the identity.
    pub fn mapped_output(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let raw = self.disc.forward(&states.concat_cols(actions))?;
        Ok(match self.form {
            DivergenceKind::KlDual => raw.map(|u| -u.exp()),
            _ => raw,
        })
    }

    /// `g` on the behavior side: `t` for kl_dual, `g` for Wasserstein.
    fn behavior_term(&self, tape: &mut Tape, raw: Var) -> Var {
        match self.form {
            DivergenceKind::KlDual => {
                let e = tape.exp(raw);
                tape.neg(e)
            }
            _ => raw,
        }
    }

    /// `f*(g)` on the policy side: `f*(−exp(u)) = −u − 1` for kl_dual,
    /// `g` for Wasserstein.
    fn policy_term(&self, tape: &mut Tape, raw: Var) -> Var {
        match self.form {
            DivergenceKind::KlDual => {
                let n = tape.neg(raw);
                tape.add_scalar(n, -1.0)
            }
            _ => raw,
        }
    }

    /// One-sided gradient penalty on interpolates `a_p + ε (a_b − a_p)`.
    fn gradient_penalty(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: &Tensor,
        policy_actions: &Tensor,
        behavior_actions: &Tensor,
        rng: &mut BracRng,
    ) -> Result<Var> {
        let (rows, ad) = (policy_actions.rows(), policy_actions.cols());
        let sd = states.cols();
        let mut mixed = policy_actions.clone();
        for r in 0..rows {
            let e: f64 = rng.gen();
            for c in 0..ad {
                let (p, b) = (policy_actions.get(r, c), behavior_actions.get(r, c));
                mixed.data_mut()[r * ad + c] = p + e * (b - p);
            }
        }
        let x = tape.constant(states.concat_cols(&mixed));
        let grad = self.disc.input_gradient_tape(tape, vars, x)?;
        let grad_a = tape.slice_cols(grad, sd, sd + ad);
        let sq = tape.square(grad_a);
        let norm2 = tape.sum_cols(sq);
        let norm2 = tape.add_scalar(norm2, SLOPE_EPS);
        let slope = tape.sqrt(norm2);
        let excess = tape.add_scalar(slope, -1.0);
        let excess = tape.relu(excess);
        let pen = tape.square(excess);
        let pen = tape.mean(pen);
        Ok(tape.scale(pen, self.cfg.penalty_coef))
    }

    /// Batch dual objective `E_b[g] − E_π[f*(g)]` without the penalty.
    fn objective_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: &Tensor,
        policy_actions: &Tensor,
        behavior_actions: &Tensor,
    ) -> Result<Var> {
        let xb = tape.constant(states.concat_cols(behavior_actions));
        let xp = tape.constant(states.concat_cols(policy_actions));
        let gb = self.disc.forward_tape(tape, vars, xb)?;
        let gp = self.disc.forward_tape(tape, vars, xp)?;
        let tb = self.behavior_term(tape, gb);
        let tp = self.policy_term(tape, gp);
        let eb = tape.mean(tb);
        let ep = tape.mean(tp);
        Ok(tape.sub(eb, ep))
    }

    /// One Adam ascent step on the penalized dual objective. `states`,
    /// `policy_actions` and `behavior_actions` are row-aligned. Returns the
    /// penalized objective before the step.
    pub fn discriminator_step(
        &mut self,
        states: &Tensor,
        policy_actions: &Tensor,
        behavior_actions: &Tensor,
        rng: &mut BracRng,
        step: u64,
    ) -> Result<f64> {
        if policy_actions.rows() != states.rows() || behavior_actions.rows() != states.rows() {
            return Err(BracError::Contract("discriminator inputs must be row-aligned".into()));
        }
        let mut tape = Tape::new();
        let vars = self.disc.bind(&mut tape, true);
        let obj = self.objective_tape(&mut tape, &vars, states, policy_actions, behavior_actions)?;
        let pen = self.gradient_penalty(&mut tape, &vars, states, policy_actions, behavior_actions, rng)?;
        let penalized = tape.sub(obj, pen);
        let loss = tape.neg(penalized);
        let value = tape.value(penalized).item();
        if !value.is_finite() {
            return Err(BracError::training("dual_discriminator_step", step, "non-finite dual objective"));
        }
        let grads = vars.grads(&tape.backward(loss)?);
        self.adam
            .step(self.disc.params_mut(), &grads)
            .map_err(|e| relabel(e, "dual_discriminator_step", step))?;
        Ok(value)
    }

    /// Runs the configured number of inner steps against fresh policy draws
    /// (one per state).
    pub fn train_inner(
        &mut self,
        states: &Tensor,
        policy: &TanhGaussianPolicy,
        behavior_actions: &Tensor,
        rng: &mut BracRng,
        step: u64,
    ) -> Result<f64> {
        let mut last = 0.0;
        for _ in 0..self.cfg.inner_steps {
            let pa = policy.sample(states, 1, rng)?.actions;
            last = self.discriminator_step(states, &pa, behavior_actions, rng, step)?;
        }
        Ok(last)
    }

    /// Per-state dual estimate `g_b(s) − mean_j f*(g(s, a_j))` with `n`
    /// policy draws per state in `policy_sample` and one behavior action
    /// per state. The discriminator is held fixed; gradients reach the
    /// policy through its draws.
    pub fn estimate_tape(
        &self,
        tape: &mut Tape,
        policy_sample: &SampleVars,
        states: Var,
        behavior_actions: &Tensor,
        n: usize,
    ) -> Result<Var> {
        let batch = tape.shape(states).0;
        let vars = self.disc.bind(tape, false);
        let b = tape.constant(behavior_actions.clone());
        let xb = tape.concat_cols(states, b);
        let gb = self.disc.forward_tape(tape, &vars, xb)?;
        let tb = self.behavior_term(tape, gb);
        let reps = tape.repeat_rows(states, n);
        let xp = tape.concat_cols(reps, policy_sample.actions);
        let gp = self.disc.forward_tape(tape, &vars, xp)?;
        let tp = self.policy_term(tape, gp);
        let tp = tape.reshape(tp, batch, n);
        let ep = tape.mean_cols(tp);
        Ok(tape.sub(tb, ep))
    }

    /// Untracked per-state estimate from explicit samples: `policy_actions`
    /// holds `n` rows per state (state-major).
    pub fn estimate(
        &self,
        states: &Tensor,
        policy_actions: &Tensor,
        behavior_actions: &Tensor,
    ) -> Result<Tensor> {
        let n = policy_actions.rows() / states.rows().max(1);
        if n == 0 || policy_actions.rows() != n * states.rows() {
            return Err(BracError::Contract("policy draws must be a multiple of the states".into()));
        }
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(policy_actions.clone());
        let dummy = SampleVars {
            actions: a,
            pre_tanh: a,
            log_probs: a,
            mean: a,
            log_std: a,
        };
        let out = self.estimate_tape(&mut tape, &dummy, s, behavior_actions, n)?;
        Ok(tape.value(out).clone())
    }
}

/// Settings shared by every estimator kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub kind: DivergenceKind,
    pub n_samples: usize,
    pub mmd_sigma: f64,
    pub dual: DualConfig,
}

impl DivergenceConfig {
    pub fn new(kind: DivergenceKind) -> Self {
        Self {
            kind,
            n_samples: DEFAULT_SAMPLES,
            mmd_sigma: DEFAULT_MMD_SIGMA,
            dual: DualConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(BracError::Config("divergence samples must be >= 1".into()));
        }
        if self.kind == DivergenceKind::Mmd && (self.n_samples < 2 || !(self.mmd_sigma > 0.0)) {
            return Err(BracError::Config("MMD needs >= 2 samples and sigma > 0".into()));
        }
        Ok(())
    }
}

/// A configured estimator, owning the discriminator for dual forms.
#[derive(Clone, Debug)]
pub struct DivergenceEstimator {
    cfg: DivergenceConfig,
    dual: Option<DualEstimator>,
}

impl DivergenceEstimator {
    pub fn new(
        cfg: DivergenceConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut BracRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let dual = if cfg.kind.is_dual() {
            Some(DualEstimator::new(cfg.kind, state_dim, action_dim, cfg.dual.clone(), rng)?)
        } else {
            None
        };
        Ok(Self { cfg, dual })
    }

    pub fn kind(&self) -> DivergenceKind {
        self.cfg.kind
    }

    pub fn config(&self) -> &DivergenceConfig {
        &self.cfg
    }

    pub fn dual(&self) -> Option<&DualEstimator> {
        self.dual.as_ref()
    }

    /// Discriminator inner loop for dual forms; a no-op otherwise.
    pub fn prepare(
        &mut self,
        states: &Tensor,
        policy: &TanhGaussianPolicy,
        behavior_actions: &Tensor,
        rng: &mut BracRng,
        step: u64,
    ) -> Result<()> {
        if let Some(d) = self.dual.as_mut() {
            d.train_inner(states, policy, behavior_actions, rng, step)?;
        }
        Ok(())
    }

    /// Per-state estimate `[batch, 1]` of `D(π(·|s), π̂_b(·|s))`.
    ///
    /// `own_sample` is the caller's single policy draw per state; the
    /// single-sample entropy form reuses it, the others draw `n_samples`
    /// fresh reparameterized actions. `behavior_actions` (one per state)
    /// feed the dual forms; when absent they are drawn from `behavior`.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate_tape(
        &self,
        tape: &mut Tape,
        policy: &TanhGaussianPolicy,
        vars: &MlpVars,
        states: Var,
        own_sample: &SampleVars,
        behavior: &TanhGaussianPolicy,
        behavior_actions: Option<&Tensor>,
        rng: &mut BracRng,
    ) -> Result<Var> {
        let n = self.cfg.n_samples;
        match self.cfg.kind {
            DivergenceKind::EntropySingleSample => {
                let batch = tape.shape(states).0;
                if tape.shape(own_sample.log_probs).0 != batch {
                    return Err(BracError::Contract("entropy form needs one draw per state".into()));
                }
                Ok(own_sample.log_probs)
            }
            DivergenceKind::Mmd => {
                let draws = policy.sample_tape(tape, vars, states, n, rng)?;
                let s = tape.value(states).clone();
                estimate_mmd(tape, &draws, &s, behavior, n, self.cfg.mmd_sigma, rng)
            }
            DivergenceKind::KlPrimal => {
                let draws = policy.sample_tape(tape, vars, states, n, rng)?;
                estimate_kl_primal(tape, &draws, states, behavior, n)
            }
            DivergenceKind::KlDual | DivergenceKind::Wasserstein => {
                let draws = policy.sample_tape(tape, vars, states, n, rng)?;
                let owned;
                let b = match behavior_actions {
                    Some(b) => b,
                    None => {
                        owned = behavior.sample(tape.value(states), 1, rng)?.actions;
                        &owned
                    }
                };
                self.dual
                    .as_ref()
                    .expect("dual forms own a discriminator")
                    .estimate_tape(tape, &draws, states, b, n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};
    use proptest::prelude::*;
    use rand::Rng;

    fn oracle_mmd(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            (-a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / sigma).exp()
        };
        let mean_k = |a: &Tensor, b: &Tensor| {
            let mut s = 0.0;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    s += k(a.row(i), b.row(j));
                }
            }
            s / (a.rows() * b.rows()) as f64
        };
        mean_k(x, x) - 2.0 * mean_k(x, y) + mean_k(y, y)
    }

    fn one_d(mean: f64, log_std: f64) -> TanhGaussianPolicy {
        TanhGaussianPolicy::constant(1, &[4], vec![-1.0], vec![1.0], &[mean], &[log_std]).unwrap()
    }

    #[test]
    fn singleton_mmd_closed_form() {
        let x = Tensor::scalar(0.0);
        let y = Tensor::scalar(20.0);
        let got = mmd_squared(&x, &y, 20.0);
        assert!((got - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = seeded(0);
        let x0 = standard_normal(5, 2, &mut rng);
        let y = standard_normal(5, 2, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(x0.clone());
        let yv = tape.constant(y.clone());
        let m = mmd_tape(&mut tape, xv, yv, 1, 1.5);
        let g = tape.backward(m).unwrap().wrt(xv);
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut q = x0.clone();
            q.data_mut()[i] -= h;
            let fd = (mmd_squared(&p, &y, 1.5) - mmd_squared(&q, &y, 1.5)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn self_mmd_of_identical_policies_is_small() {
        let mut rng = seeded(1);
        let b = TanhGaussianPolicy::new(3, &[8], vec![-1.0; 2], vec![1.0; 2], &mut rng).unwrap();
        let p = b.clone();
        let states = standard_normal(64, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let draws = p.sample_tape(&mut tape, &vars, s, 10, &mut rng).unwrap();
        let est = estimate_mmd(&mut tape, &draws, &states, &b, 10, 20.0, &mut rng).unwrap();
        let mean = tape.value(est).mean();
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn far_apart_policies_approach_the_bound() {
        // Bounds ±1000 with σ_kernel = 20: tanh(±2) puts the policies ~1900
        // apart, so the cross term vanishes.
        let mk = |m: f64| {
            TanhGaussianPolicy::constant(1, &[2], vec![-1000.0], vec![1000.0], &[m], &[-6.0]).unwrap()
        };
        let (p, b) = (mk(-2.0), mk(2.0));
        let mut rng = seeded(2);
        let states = Tensor::zeros(4, 1);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let draws = p.sample_tape(&mut tape, &vars, s, 10, &mut rng).unwrap();
        let est = estimate_mmd(&mut tape, &draws, &states, &b, 10, 20.0, &mut rng).unwrap();
        for &v in tape.value(est).data() {
            assert!(v <= 2.0 && v > 1.9, "{v}");
        }
    }

    #[test]
    fn mmd_grows_with_mean_offset() {
        let b = one_d(0.0, -1.0);
        let states = Tensor::zeros(16, 1);
        let est_at = |m: f64| {
            let p = one_d(m, -1.0);
            let mut rng = seeded(3);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, false);
            let s = tape.constant(states.clone());
            let draws = p.sample_tape(&mut tape, &vars, s, 10, &mut rng).unwrap();
            let e = estimate_mmd(&mut tape, &draws, &states, &b, 10, 0.5, &mut rng).unwrap();
            tape.value(e).mean()
        };
        let (lo, mid, hi) = (est_at(0.2), est_at(0.21), est_at(0.6));
        assert!(mid > lo && hi > mid, "{lo} {mid} {hi}");
    }

    fn kl_primal_mc(p: &TanhGaussianPolicy, b: &TanhGaussianPolicy, rows: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let s = tape.constant(Tensor::zeros(rows, p.state_dim()));
        let draws = p.sample_tape(&mut tape, &vars, s, n, &mut rng).unwrap();
        let e = estimate_kl_primal(&mut tape, &draws, s, b, n).unwrap();
        tape.value(e).clone()
    }

    #[test]
    fn kl_primal_of_identical_policies_is_exactly_zero() {
        let mut rng = seeded(4);
        let b = TanhGaussianPolicy::new(2, &[8], vec![-1.0, -3.0], vec![1.0, 2.0], &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = b.bind(&mut tape, false);
        let s = tape.constant(standard_normal(20, 2, &mut rng));
        let draws = b.sample_tape(&mut tape, &vars, s, 10, &mut rng).unwrap();
        let e = estimate_kl_primal(&mut tape, &draws, s, &b, 10).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_primal_matches_analytic_gaussian_kl() {
        let est = kl_primal_mc(&one_d(0.0, 0.0), &one_d(1.0, 0.0), 1, 10_000, 5).item();
        assert!((est - 0.5).abs() < 0.05, "{est}");
    }

    #[test]
    fn kl_primal_is_nonnegative_on_average() {
        let mut rng = seeded(6);
        let mut total = 0.0;
        for t in 0..100 {
            let (m1, m2) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (s1, s2) = (rng.gen_range(-1.0..0.5), rng.gen_range(-1.0..0.5));
            total += kl_primal_mc(&one_d(m1, s1), &one_d(m2, s2), 1, 200, t).item();
        }
        assert!(total / 100.0 >= -0.01);
    }

    fn dual(form: DivergenceKind, seed: u64) -> DualEstimator {
        let cfg = DualConfig {
            hidden: vec![16, 16],
            ..DualConfig::default()
        };
        DualEstimator::new(form, 1, 1, cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn wasserstein_objective_vanishes_on_identical_samples() {
        let d = dual(DivergenceKind::Wasserstein, 7);
        let mut rng = seeded(7);
        let s = standard_normal(8, 1, &mut rng);
        let a = standard_normal(8, 1, &mut rng);
        let mut tape = Tape::new();
        let vars = d.disc.bind(&mut tape, false);
        let obj = d.objective_tape(&mut tape, &vars, &s, &a, &a).unwrap();
        assert_eq!(tape.value(obj).item(), 0.0);
    }

    #[test]
    fn kl_dual_conjugate_at_minus_one() {
        let d = dual(DivergenceKind::KlDual, 8);
        let mut tape = Tape::new();
        let raw = tape.constant(Tensor::scalar(0.0));
        let t = d.behavior_term(&mut tape, raw);
        assert_eq!(tape.value(t).item(), -1.0);
        let fstar = d.policy_term(&mut tape, raw);
        assert_eq!(tape.value(fstar).item(), -1.0);
    }

    #[test]
    fn constant_discriminator_has_zero_penalty_and_zero_estimate() {
        let disc = Mlp::zeros(&[2, 8, 1]).unwrap();
        let d = DualEstimator::with_discriminator(DivergenceKind::Wasserstein, disc, DualConfig::default());
        let mut rng = seeded(9);
        let s = standard_normal(6, 1, &mut rng);
        let (pa, ba) = (standard_normal(6, 1, &mut rng), standard_normal(6, 1, &mut rng));
        let mut tape = Tape::new();
        let vars = d.disc.bind(&mut tape, false);
        let pen = d.gradient_penalty(&mut tape, &vars, &s, &pa, &ba, &mut rng).unwrap();
        assert_eq!(tape.value(pen).item(), 0.0);
        let est = d.estimate(&s, &pa.repeat_rows(1), &ba).unwrap();
        assert!(est.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_penalty_only_charges_steep_slopes() {
        // g(s, a) = 3a: slope 3 everywhere → penalty 5·(3 − 1)² = 20.
        let mut disc = Mlp::zeros(&[2, 1]).unwrap();
        disc.params_mut()[0].data_mut().copy_from_slice(&[0.0, 3.0]);
        let d = DualEstimator::with_discriminator(DivergenceKind::Wasserstein, disc.clone(), DualConfig::default());
        let mut rng = seeded(10);
        let s = standard_normal(5, 1, &mut rng);
        let (pa, ba) = (standard_normal(5, 1, &mut rng), standard_normal(5, 1, &mut rng));
        let mut tape = Tape::new();
        let vars = d.disc.bind(&mut tape, false);
        let pen = d.gradient_penalty(&mut tape, &vars, &s, &pa, &ba, &mut rng).unwrap();
        assert!((tape.value(pen).item() - 20.0).abs() < 1e-8);

        disc.params_mut()[0].data_mut().copy_from_slice(&[5.0, 0.5]);
        let d = DualEstimator::with_discriminator(DivergenceKind::Wasserstein, disc, DualConfig::default());
        let mut tape = Tape::new();
        let vars = d.disc.bind(&mut tape, false);
        let pen = d.gradient_penalty(&mut tape, &vars, &s, &pa, &ba, &mut rng).unwrap();
        assert_eq!(tape.value(pen).item(), 0.0);
    }

    #[test]
    fn kl_dual_mapped_outputs_are_negative() {
        let d = dual(DivergenceKind::KlDual, 11);
        let mut rng = seeded(11);
        let t = d.mapped_output(&standard_normal(50, 1, &mut rng), &standard_normal(50, 1, &mut rng).map(|x| 40.0 * x)).unwrap();
        assert!(t.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn discriminator_learns_to_separate_point_masses() {
        let mut d = dual(DivergenceKind::Wasserstein, 12);
        let mut rng = seeded(12);
        let s = Tensor::zeros(32, 1);
        let (p, b) = (Tensor::zeros(32, 1), Tensor::filled(32, 1, 1.0));
        let before = d.estimate(&s, &p, &b).unwrap().mean();
        for step in 0..300 {
            d.discriminator_step(&s, &p, &b, &mut rng, step).unwrap();
        }
        let after = d.estimate(&s, &p, &b).unwrap().mean();
        assert!(after > before + 0.01, "{before} -> {after}");
    }

    #[test]
    fn estimators_are_deterministic_and_per_state() {
        let mut rng = seeded(13);
        let b = TanhGaussianPolicy::new(2, &[8], vec![-1.0], vec![1.0], &mut rng).unwrap();
        let p = TanhGaussianPolicy::new(2, &[8], vec![-1.0], vec![1.0], &mut rng).unwrap();
        let states = standard_normal(7, 2, &mut rng);
        for kind in [
            DivergenceKind::Mmd,
            DivergenceKind::KlPrimal,
            DivergenceKind::KlDual,
            DivergenceKind::Wasserstein,
            DivergenceKind::EntropySingleSample,
        ] {
            let run = || {
                let mut cfg = DivergenceConfig::new(kind);
                cfg.dual.hidden = vec![8];
                let mut rng = seeded(99);
                let est = DivergenceEstimator::new(cfg, 2, 1, &mut rng).unwrap();
                let mut tape = Tape::new();
                let vars = p.bind(&mut tape, true);
                let s = tape.constant(states.clone());
                let own = p.sample_tape(&mut tape, &vars, s, 1, &mut rng).unwrap();
                let e = est.estimate_tape(&mut tape, &p, &vars, s, &own, &b, None, &mut rng).unwrap();
                tape.value(e).clone()
            };
            let (x, y) = (run(), run());
            assert_eq!(x.shape(), &[7, 1], "{kind:?}");
            assert_eq!(x, y, "{kind:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mmd_matches_oracle_and_is_symmetric(
            n in 1usize..12, m in 1usize..12, d in 1usize..5, seed in any::<u64>(), sigma in 0.1f64..30.0,
        ) {
            let mut rng = seeded(seed);
            let x = standard_normal(n, d, &mut rng);
            let y = standard_normal(m, d, &mut rng).map(|v| 2.0 * v + 0.5);
            let got = mmd_squared(&x, &y, sigma);
            prop_assert!((got - oracle_mmd(&x, &y, sigma)).abs() < 1e-12);
            prop_assert!((got - mmd_squared(&y, &x, sigma)).abs() < 1e-12);
            prop_assert_eq!(mmd_squared(&x, &x, sigma), 0.0);
        }
    }
}
