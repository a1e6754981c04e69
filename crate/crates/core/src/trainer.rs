//! The offline actor-critic loop: penalized critic targets, regularized
//! actor steps, fixed or adaptive regularization weight, and the BCQ and
//! behavior-cloning baselines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::critics::{td_target_from_values, QEnsemble, TargetCombiner, Which};
use crate::data::{Batch, OfflineDataset};
use crate::divergences::{DivergenceConfig, DivergenceEstimator, DivergenceKind};
use crate::envs::{ActionSelector, Environment};
use crate::error::{BracError, Result};
use crate::harness::{evaluate, tail_mean, EvalProtocol, MaxQSelector};
use crate::nn::Mlp;
use crate::optim::{Adam, AdamConfig};
use crate::policies::{relabel, MeanAction, TanhGaussianPolicy};
use crate::rng::{derive_seed, seeded, BracRng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ValuePenalty,
    PolicyRegularization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed { alpha: f64 },
    Adaptive { epsilon: f64, dual_lr: f64, initial_alpha: f64 },
}

/// `α = exp(log_alpha)`, moved towards the divergence threshold `ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveAlpha {
    pub log_alpha: f64,
    pub dual_lr: f64,
    pub epsilon: f64,
}

impl AdaptiveAlpha {
    pub fn new(initial_alpha: f64, epsilon: f64, dual_lr: f64) -> Result<Self> {
        if !(initial_alpha > 0.0) || !(epsilon > 0.0) || !(dual_lr > 0.0) {
            return Err(BracError::Config(
                "adaptive alpha needs initial alpha, epsilon and dual lr > 0".into(),
            ));
        }
        Ok(Self {
            log_alpha: initial_alpha.ln(),
            dual_lr,
            epsilon,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// `log_alpha += dual_lr · (mean_divergence − ε)`.
    pub fn update(&mut self, mean_divergence: f64) -> Result<f64> {
        if !mean_divergence.is_finite() {
            return Err(BracError::Contract(format!(
                "mean divergence must be finite, got {mean_divergence}"
            )));
        }
        self.log_alpha += self.dual_lr * (mean_divergence - self.epsilon);
        Ok(self.alpha())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcqConfig {
    /// Perturbation range as a fraction of the half action range.
    pub phi: f64,
    pub n_candidates: usize,
}

impl BcqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi >= 0.0) || self.n_candidates == 0 {
            return Err(BracError::Config("BCQ needs phi >= 0 and at least one candidate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Brac,
    Bcq,
    Bc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    MmdVp,
    MmdPr,
    KlVp,
    KlPr,
    KldualVp,
    KldualPr,
    WVp,
    WPr,
    Bear,
    Bcq,
    Sac,
    Bc,
}

impl Algo {
    pub const ALL: [Algo; 12] = [
        Algo::MmdVp,
        Algo::MmdPr,
        Algo::KlVp,
        Algo::KlPr,
        Algo::KldualVp,
        Algo::KldualPr,
        Algo::WVp,
        Algo::WPr,
        Algo::Bear,
        Algo::Bcq,
        Algo::Sac,
        Algo::Bc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::MmdVp => "mmd_vp",
            Algo::MmdPr => "mmd_pr",
            Algo::KlVp => "kl_vp",
            Algo::KlPr => "kl_pr",
            Algo::KldualVp => "kldual_vp",
            Algo::KldualPr => "kldual_pr",
            Algo::WVp => "w_vp",
            Algo::WPr => "w_pr",
            Algo::Bear => "bear",
            Algo::Bcq => "bcq",
            Algo::Sac => "sac",
            Algo::Bc => "bc",
        }
    }

    /// The regularization-strength knob: `alpha`, `epsilon`, `phi`, or none.
    pub fn strength_name(self) -> Option<&'static str> {
        match self {
            Algo::Bear => Some("epsilon"),
            Algo::Bcq => Some("phi"),
            Algo::Sac | Algo::Bc => None,
            _ => Some("alpha"),
        }
    }

    /// Grid of strengths searched for this algorithm.
    pub fn strength_grid(self) -> Vec<f64> {
        match self {
            Algo::MmdVp | Algo::MmdPr => vec![3.0, 10.0, 30.0, 100.0, 300.0],
            Algo::KlVp | Algo::KlPr | Algo::KldualVp | Algo::KldualPr => {
                vec![0.1, 0.3, 1.0, 3.0, 10.0]
            }
            Algo::WVp | Algo::WPr => vec![0.3, 1.0, 3.0, 10.0, 30.0],
            Algo::Bear => vec![0.015, 0.05, 0.15, 0.5, 1.5],
            Algo::Bcq => vec![0.005, 0.015, 0.05, 0.15, 0.5],
            Algo::Sac | Algo::Bc => vec![0.0],
        }
    }

    fn divergence(self) -> Option<(DivergenceKind, Mode)> {
        use DivergenceKind as D;
        use Mode::*;
        Some(match self {
            Algo::MmdVp => (D::Mmd, ValuePenalty),
            Algo::MmdPr | Algo::Bear => (D::Mmd, PolicyRegularization),
            Algo::KlVp => (D::KlPrimal, ValuePenalty),
            Algo::KlPr => (D::KlPrimal, PolicyRegularization),
            Algo::KldualVp => (D::KlDual, ValuePenalty),
            Algo::KldualPr => (D::KlDual, PolicyRegularization),
            Algo::WVp => (D::Wasserstein, ValuePenalty),
            Algo::WPr => (D::Wasserstein, PolicyRegularization),
            Algo::Sac => (D::EntropySingleSample, ValuePenalty),
            Algo::Bcq | Algo::Bc => return None,
        })
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = BracError;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| BracError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub algo: Algo,
    pub learner: Learner,
    pub mode: Mode,
    pub divergence: DivergenceConfig,
    pub alpha_mode: AlphaMode,
    pub k: usize,
    pub combiner: TargetCombiner,
    pub gamma: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub tau: f64,
    pub seed: u64,
    pub policy_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    pub bcq: Option<BcqConfig>,
    pub eval: EvalProtocol,
    /// Steps between evaluations; `None` means `total_steps / 100`.
    pub eval_interval: Option<usize>,
    /// Batches averaged for the reported mean learned Q.
    pub q_window: usize,
}

impl TrainerConfig {
    /// Defaults for `algo`; `strength` is α, ε or Φ as the algorithm uses.
    pub fn preset(algo: Algo, strength: f64, action_dim: usize) -> Self {
        let mut cfg = Self {
            algo,
            learner: Learner::Brac,
            mode: Mode::ValuePenalty,
            divergence: DivergenceConfig::new(DivergenceKind::KlPrimal),
            alpha_mode: AlphaMode::Fixed { alpha: strength },
            k: 2,
            combiner: TargetCombiner::min(),
            gamma: 0.99,
            policy_lr: 1e-4,
            q_lr: 1e-3,
            batch_size: 256,
            total_steps: 100_000,
            tau: 0.005,
            seed: 0,
            policy_hidden: vec![200, 200],
            q_hidden: vec![300, 300],
            bcq: None,
            eval: EvalProtocol::default(),
            eval_interval: None,
            q_window: 500,
        };
        if let Some((kind, mode)) = algo.divergence() {
            cfg.divergence = DivergenceConfig::new(kind);
            cfg.mode = mode;
        }
        match algo {
            Algo::Bear => {
                cfg.k = 4;
                cfg.combiner = TargetCombiner::weighted(0.75).expect("valid lambda");
                cfg.alpha_mode = AlphaMode::Adaptive {
                    epsilon: strength,
                    dual_lr: 0.01,
                    initial_alpha: 1.0,
                };
            }
            Algo::Sac => {
                cfg.alpha_mode = AlphaMode::Adaptive {
                    epsilon: action_dim as f64,
                    dual_lr: 0.01,
                    initial_alpha: 1.0,
                };
            }
            Algo::Bcq => {
                cfg.learner = Learner::Bcq;
                cfg.combiner = TargetCombiner::weighted(0.75).expect("valid lambda");
                cfg.batch_size = 100;
                cfg.alpha_mode = AlphaMode::Fixed { alpha: 0.0 };
                cfg.bcq = Some(BcqConfig {
                    phi: strength,
                    n_candidates: 10,
                });
            }
            Algo::Bc => {
                cfg.learner = Learner::Bc;
                cfg.alpha_mode = AlphaMode::Fixed { alpha: 0.0 };
            }
            _ => {}
        }
        cfg
    }

    /// Sets α, ε or Φ, whichever the algorithm tunes.
    pub fn set_strength(&mut self, value: f64) {
        match (&mut self.bcq, &mut self.alpha_mode) {
            (Some(b), _) if self.learner == Learner::Bcq => b.phi = value,
            (_, AlphaMode::Fixed { alpha }) => *alpha = value,
            (_, AlphaMode::Adaptive { epsilon, .. }) if self.algo != Algo::Sac => *epsilon = value,
            _ => {}
        }
    }

    /// The value of the algorithm's strength knob.
    pub fn strength(&self) -> f64 {
        match (self.learner, self.alpha_mode, self.bcq) {
            (Learner::Bcq, _, Some(b)) => b.phi,
            (_, AlphaMode::Fixed { alpha }, _) => alpha,
            (_, AlphaMode::Adaptive { epsilon, .. }, _) => epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BracError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.k == 0 {
            return bad("batch size and ensemble size must be >= 1");
        }
        if !(self.policy_lr > 0.0) || !(self.q_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        match self.alpha_mode {
            AlphaMode::Fixed { alpha } if !(alpha >= 0.0) => return bad("alpha must be >= 0"),
            AlphaMode::Adaptive {
                epsilon,
                dual_lr,
                initial_alpha,
            } if !(epsilon > 0.0 && dual_lr > 0.0 && initial_alpha > 0.0) => {
                return bad("adaptive alpha needs epsilon, dual lr and initial alpha > 0")
            }
            _ => {}
        }
        if self.learner == Learner::Bcq {
            match self.bcq {
                Some(b) => b.validate()?,
                None => return bad("BCQ runs need a BCQ section"),
            }
        }
        if self.q_window == 0 {
            return bad("q_window must be >= 1");
        }
        self.divergence.validate()?;
        self.eval.validate()
    }

    pub fn eval_every(&self) -> usize {
        self.eval_interval
            .unwrap_or(self.total_steps / 100)
            .max(1)
    }
}

#[derive(Clone, Debug)]
enum AlphaState {
    Fixed(f64),
    Adaptive(AdaptiveAlpha),
}

impl AlphaState {
    fn value(&self) -> f64 {
        match self {
            AlphaState::Fixed(a) => *a,
            AlphaState::Adaptive(a) => a.alpha(),
        }
    }
}

/// Perturbation network `ξ(s, a) = Φ · scale · tanh(net(s, a))`.
#[derive(Clone, Debug)]
pub struct BcqPerturbation {
    pub cfg: BcqConfig,
    net: Mlp,
    adam: Adam,
    low: Vec<f64>,
    high: Vec<f64>,
}

impl BcqPerturbation {
    pub fn new(
        cfg: BcqConfig,
        state_dim: usize,
        hidden: &[usize],
        low: Vec<f64>,
        high: Vec<f64>,
        lr: f64,
        rng: &mut BracRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![state_dim + low.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(low.len());
        let net = Mlp::new(&sizes, rng)?;
        let adam = Adam::new(AdamConfig::with_lr(lr), net.params());
        Ok(Self {
            cfg,
            net,
            adam,
            low,
            high,
        })
    }

    fn bound(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| self.cfg.phi * 0.5 * (h - l))
            .collect()
    }

    /// `clip(a + ξ(s, a))`, untracked.
    pub fn perturb(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let raw = self.net.forward(&states.concat_cols(actions))?;
        let bound = self.bound();
        let ad = actions.cols();
        let mut out = actions.clone();
        for (i, a) in out.data_mut().iter_mut().enumerate() {
            let j = i % ad;
            *a = (*a + bound[j] * raw.data()[i].tanh()).clamp(self.low[j], self.high[j]);
        }
        Ok(out)
    }

    /// One ascent step on `min_j Q_j(s, clip(a_b + ξ(s, a_b)))`.
    fn train_step(
        &mut self,
        critic: &QEnsemble,
        states: &Tensor,
        behavior_actions: &Tensor,
        step: u64,
    ) -> Result<f64> {
        let (lo, hi) = uniform_bounds(&self.low, &self.high)?;
        let mut tape = Tape::new();
        let vars = self.net.bind(&mut tape, true);
        let s = tape.constant(states.clone());
        let a = tape.constant(behavior_actions.clone());
        let x = tape.concat_cols(s, a);
        let raw = self.net.forward_tape(&mut tape, &vars, x)?;
        let t = tape.tanh(raw);
        let bound = tape.constant(Tensor::from_vec(1, self.low.len(), self.bound()));
        let delta = tape.mul_row(t, bound);
        let moved = tape.add(a, delta);
        let moved = tape.clamp(moved, lo, hi);
        let qvars = critic.bind_sources(&mut tape, false);
        let sa = tape.concat_cols(s, moved);
        let q = critic.min_q_tape(&mut tape, &qvars, sa)?;
        let mq = tape.mean(q);
        let loss = tape.neg(mq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(BracError::training("bcq_perturbation", step, "non-finite loss"));
        }
        let grads = vars.grads(&tape.backward(loss)?);
        self.adam
            .step(self.net.params_mut(), &grads)
            .map_err(|e| relabel(e, "bcq_perturbation", step))?;
        Ok(value)
    }
}

fn uniform_bounds(low: &[f64], high: &[f64]) -> Result<(f64, f64)> {
    let (lo, hi) = (low[0], high[0]);
    if low.iter().any(|&l| l != lo) || high.iter().any(|&h| h != hi) {
        return Err(BracError::Config("BCQ needs identical bounds on every action dimension".into()));
    }
    Ok((lo, hi))
}

/// Index of the largest entry in each row of `values` (`[rows, n]`), first
/// index on ties.
pub fn argmax_rows(values: &[f64], n: usize) -> Vec<usize> {
    values
        .chunks(n)
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per state: `N` behavior candidates, each perturbed by `ξ` and clipped,
/// and the one with the highest minimum source Q is kept.
pub fn bcq_select(
    bcq: &BcqPerturbation,
    critic: &QEnsemble,
    behavior: &TanhGaussianPolicy,
    states: &Tensor,
    rng: &mut BracRng,
) -> Result<Tensor> {
    let n = bcq.cfg.n_candidates;
    let cand = behavior.sample(states, n, rng)?.actions;
    let reps = states.repeat_rows(n);
    let moved = bcq.perturb(&reps, &cand)?;
    let q = critic.q_values(&reps, &moved, Which::Source)?;
    let qmin = TargetCombiner::min().combine(&q)?;
    let pick = argmax_rows(qmin.data(), n);
    let idx: Vec<usize> = pick.iter().enumerate().map(|(i, &j)| i * n + j).collect();
    Ok(moved.select_rows(&idx))
}

/// Diagnostics of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub actor_loss: f64,
    pub mean_divergence: f64,
    pub mean_q: f64,
    pub alpha: f64,
}

/// Mutable training state for one run.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    cfg: TrainerConfig,
    behavior: &'a TanhGaussianPolicy,
    policy: TanhGaussianPolicy,
    policy_adam: Adam,
    critic: QEnsemble,
    critic_adams: Vec<Adam>,
    divergence: Option<DivergenceEstimator>,
    alpha: AlphaState,
    bcq: Option<BcqPerturbation>,
    rng: BracRng,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainerConfig, behavior: &'a TanhGaussianPolicy) -> Result<Self> {
        cfg.validate()?;
        let (sd, ad) = (behavior.state_dim(), behavior.action_dim());
        let (low, high) = (behavior.action_low().to_vec(), behavior.action_high().to_vec());
        let mut rng = seeded(cfg.seed);
        let policy = TanhGaussianPolicy::new(sd, &cfg.policy_hidden, low.clone(), high.clone(), &mut rng)?;
        let critic = QEnsemble::new(sd, ad, &cfg.q_hidden, cfg.k, cfg.tau, &mut rng)?;
        let divergence = match cfg.learner {
            Learner::Brac => Some(DivergenceEstimator::new(cfg.divergence.clone(), sd, ad, &mut rng)?),
            _ => None,
        };
        let bcq = match (cfg.learner, cfg.bcq) {
            (Learner::Bcq, Some(b)) => Some(BcqPerturbation::new(
                b,
                sd,
                &cfg.policy_hidden,
                low,
                high,
                cfg.policy_lr,
                &mut rng,
            )?),
            _ => None,
        };
        let alpha = match cfg.alpha_mode {
            AlphaMode::Fixed { alpha } => AlphaState::Fixed(alpha),
            AlphaMode::Adaptive {
                epsilon,
                dual_lr,
                initial_alpha,
            } => AlphaState::Adaptive(AdaptiveAlpha::new(initial_alpha, epsilon, dual_lr)?),
        };
        Ok(Self {
            policy_adam: Adam::new(AdamConfig::with_lr(cfg.policy_lr), policy.trunk().params()),
            critic_adams: critic.new_optimizers(AdamConfig::with_lr(cfg.q_lr)),
            cfg,
            behavior,
            policy,
            critic,
            divergence,
            alpha,
            bcq,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &TanhGaussianPolicy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut TanhGaussianPolicy {
        &mut self.policy
    }

    pub fn critic(&self) -> &QEnsemble {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut QEnsemble {
        &mut self.critic
    }

    pub fn bcq(&self) -> Option<&BcqPerturbation> {
        self.bcq.as_ref()
    }

    pub fn rng_mut(&mut self) -> &mut BracRng {
        &mut self.rng
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value()
    }

    /// Weight on the next-state penalty inside the critic target.
    pub fn critic_alpha(&self) -> f64 {
        match self.cfg.mode {
            Mode::ValuePenalty if self.cfg.learner == Learner::Brac => self.alpha(),
            _ => 0.0,
        }
    }

    /// TD targets `[batch, 1]` for the current networks.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Tensor> {
        let alpha_eff = self.critic_alpha();
        let (next_actions, penalty) = match self.cfg.learner {
            Learner::Bcq => {
                let bcq = self.bcq.as_ref().expect("BCQ state");
                let a = bcq_select(bcq, &self.critic, self.behavior, &batch.next_states, &mut self.rng)?;
                (a, Tensor::zeros(batch.len(), 1))
            }
            _ => {
                let mut tape = Tape::new();
                let vars = self.policy.bind(&mut tape, false);
                let s = tape.constant(batch.next_states.clone());
                let own = self.policy.sample_tape(&mut tape, &vars, s, 1, &mut self.rng)?;
                let actions = tape.value(own.actions).clone();
                // Skipping the estimate at α_eff = 0 keeps targets and RNG use
                // identical across modes.
                let penalty = if alpha_eff == 0.0 {
                    Tensor::zeros(batch.len(), 1)
                } else {
                    let div = self.divergence.as_ref().expect("BRAC divergence");
                    let p = div.estimate_tape(
                        &mut tape,
                        &self.policy,
                        &vars,
                        s,
                        &own,
                        self.behavior,
                        None,
                        &mut self.rng,
                    )?;
                    tape.value(p).clone()
                };
                (actions, penalty)
            }
        };
        let q_next = self.critic.q_values(&batch.next_states, &next_actions, Which::Target)?;
        let q_bar = self.cfg.combiner.combine(&q_next)?;
        let targets = td_target_from_values(
            &q_bar,
            &batch.rewards,
            &batch.dones,
            &penalty,
            alpha_eff,
            self.cfg.gamma,
        )?;
        if !targets.is_finite() {
            return Err(BracError::training("critic_update", self.step, "non-finite TD target"));
        }
        Ok(targets)
    }

    /// Regresses the ensemble onto fresh targets; returns the TD loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let targets = self.critic_targets(batch)?;
        self.critic
            .fit_step(&mut self.critic_adams, &batch.states, &batch.actions, &targets, self.step)
    }

    /// One policy step; returns `(actor_loss, mean_divergence)`.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        match self.cfg.learner {
            Learner::Brac => self.brac_actor_update(batch),
            Learner::Bcq => {
                let ab = self.behavior.sample(&batch.states, 1, &mut self.rng)?.actions;
                let bcq = self.bcq.as_mut().expect("BCQ state");
                let loss = bcq.train_step(&self.critic, &batch.states, &ab, self.step)?;
                Ok((loss, 0.0))
            }
            Learner::Bc => {
                let mut tape = Tape::new();
                let vars = self.policy.bind(&mut tape, true);
                let s = tape.constant(batch.states.clone());
                let a = self.policy.clip_inward(&batch.actions);
                let lp = self.policy.log_prob_tape(&mut tape, &vars, s, &a)?;
                let ll = tape.mean(lp);
                let loss = tape.neg(ll);
                self.apply_policy_step(&tape, loss, &vars)?;
                Ok((tape.value(loss).item(), 0.0))
            }
        }
    }

    fn brac_actor_update(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let div = self.divergence.as_mut().expect("BRAC divergence");
        div.prepare(&batch.states, &self.policy, &batch.actions, &mut self.rng, self.step)?;
        let div = self.divergence.as_ref().expect("BRAC divergence");
        let alpha = self.alpha.value();
        let mut tape = Tape::new();
        let vars = self.policy.bind(&mut tape, true);
        let s = tape.constant(batch.states.clone());
        let own = self.policy.sample_tape(&mut tape, &vars, s, 1, &mut self.rng)?;
        let qvars = self.critic.bind_sources(&mut tape, false);
        let sa = tape.concat_cols(s, own.actions);
        let q = self.critic.min_q_tape(&mut tape, &qvars, sa)?;
        let d = div.estimate_tape(
            &mut tape,
            &self.policy,
            &vars,
            s,
            &own,
            self.behavior,
            Some(&batch.actions),
            &mut self.rng,
        )?;
        let ad = tape.scale(d, alpha);
        let per_state = tape.sub(ad, q);
        let loss = tape.mean(per_state);
        let mean_div = tape.value(d).mean();
        self.apply_policy_step(&tape, loss, &vars)?;
        Ok((tape.value(loss).item(), mean_div))
    }

    fn apply_policy_step(&mut self, tape: &Tape, loss: crate::tape::Var, vars: &crate::nn::MlpVars) -> Result<()> {
        if !tape.value(loss).item().is_finite() {
            return Err(BracError::training("actor_update", self.step, "non-finite actor loss"));
        }
        let grads = vars.grads(&tape.backward(loss)?);
        self.policy_adam
            .step(self.policy.trunk_mut().params_mut(), &grads)
            .map_err(|e| relabel(e, "actor_update", self.step))
    }

    /// Mean source Q over members and rows at the logged `(s, a)`.
    pub fn mean_q(&self, batch: &Batch) -> Result<f64> {
        Ok(self.critic.q_values(&batch.states, &batch.actions, Which::Source)?.mean())
    }

    /// Critic step, actor step, then the α update, on a given batch.
    pub fn step_on_batch(&mut self, batch: &Batch) -> Result<StepStats> {
        let mut stats = StepStats::default();
        if self.cfg.learner != Learner::Bc {
            stats.mean_q = self.mean_q(batch)?;
            stats.td_loss = self.critic_update(batch)?;
        }
        let (actor_loss, mean_div) = self.actor_update(batch)?;
        stats.actor_loss = actor_loss;
        stats.mean_divergence = mean_div;
        if let AlphaState::Adaptive(a) = &mut self.alpha {
            a.update(mean_div)
                .map_err(|e| BracError::training("adaptive_alpha", self.step, e.to_string()))?;
        }
        stats.alpha = self.alpha.value();
        if !stats.alpha.is_finite() {
            return Err(BracError::training("adaptive_alpha", self.step, "alpha overflowed"));
        }
        self.step += 1;
        Ok(stats)
    }

    pub fn train_step(&mut self, ds: &OfflineDataset) -> Result<StepStats> {
        let batch = ds.sample_batch(self.cfg.batch_size.min(ds.len()), &mut self.rng)?;
        self.step_on_batch(&batch)
    }

    /// Mean return under the evaluation rule for this learner.
    pub fn evaluate(&self, env: &dyn Environment, seed: u64) -> Result<f64> {
        let protocol = &self.cfg.eval;
        match self.cfg.learner {
            Learner::Bc => evaluate(env, &MeanAction(&self.policy), protocol, seed),
            Learner::Bcq => {
                let sel = BcqSelector {
                    bcq: self.bcq.as_ref().expect("BCQ state"),
                    critic: &self.critic,
                    behavior: self.behavior,
                };
                evaluate(env, &sel, protocol, seed)
            }
            Learner::Brac => {
                let sel = MaxQSelector::new(&self.policy, &self.critic, protocol.action_samples);
                evaluate(env, &sel, protocol, seed)
            }
        }
    }
}

/// Evaluation-time BCQ policy.
pub struct BcqSelector<'a> {
    pub bcq: &'a BcqPerturbation,
    pub critic: &'a QEnsemble,
    pub behavior: &'a TanhGaussianPolicy,
}

impl ActionSelector for BcqSelector<'_> {
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor {
        bcq_select(self.bcq, self.critic, self.behavior, states, rng).expect("matching dimensions")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QPoint {
    pub step: u64,
    pub mean_q: f64,
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainerConfig,
    pub env: String,
    pub dataset: String,
    pub eval_trace: Vec<EvalPoint>,
    /// Mean learned Q over the batches of each evaluation window.
    pub q_trace: Vec<QPoint>,
    /// Mean learned Q over the last `q_window` training batches.
    pub mean_q_last: Option<f64>,
    /// Mean of the last `tail_points` evaluations, unclamped; 0 on failure.
    pub final_score: f64,
    pub failed: bool,
    pub failure: Option<String>,
    pub steps_completed: u64,
    pub final_alpha: f64,
}

impl RunRecord {
    /// Score as reported: negative values count as 0.
    pub fn reported_score(&self) -> f64 {
        self.final_score.max(0.0)
    }
}

const EVAL_STREAM: u64 = 0x4556_414c;

/// Artifacts of a finished run alongside its record.
pub struct TrainedRun<'a> {
    pub record: RunRecord,
    pub trainer: Trainer<'a>,
}

/// Alternating critic/actor updates with periodic evaluation. Training
/// failures end the run early and are recorded with score 0.
pub fn train_offline<'a>(
    cfg: TrainerConfig,
    ds: &OfflineDataset,
    behavior: &'a TanhGaussianPolicy,
    env: &dyn Environment,
) -> Result<TrainedRun<'a>> {
    if ds.is_empty() {
        return Err(BracError::Config("training needs a non-empty dataset".into()));
    }
    if ds.state_dim() != env.state_dim() || ds.action_dim() != env.action_dim() {
        return Err(BracError::Config("dataset does not match the environment".into()));
    }
    if behavior.state_dim() != env.state_dim() || behavior.action_dim() != env.action_dim() {
        return Err(BracError::Config("behavior policy does not match the environment".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), behavior)?;
    let every = cfg.eval_every();
    let mut record = RunRecord {
        config: cfg.clone(),
        env: env.name().as_str().to_string(),
        dataset: ds.noise_tag().to_string(),
        eval_trace: Vec::new(),
        q_trace: Vec::new(),
        mean_q_last: None,
        final_score: 0.0,
        failed: false,
        failure: None,
        steps_completed: 0,
        final_alpha: trainer.alpha(),
    };
    let mut recent_q: VecDeque<f64> = VecDeque::with_capacity(cfg.q_window);
    let mut window_q = Vec::with_capacity(every);
    let eval_seed = |point: u64| derive_seed(cfg.seed, &[EVAL_STREAM, point]);

    let outcome: Result<()> = (|| {
        let r0 = trainer.evaluate(env, eval_seed(0))?;
        check_return(r0, 0)?;
        record.eval_trace.push(EvalPoint {
            step: 0,
            mean_return: r0,
        });
        for step in 1..=cfg.total_steps {
            let stats = trainer.train_step(ds)?;
            if cfg.learner != Learner::Bc {
                if recent_q.len() == cfg.q_window {
                    recent_q.pop_front();
                }
                recent_q.push_back(stats.mean_q);
                window_q.push(stats.mean_q);
            }
            record.steps_completed = step as u64;
            if step % every == 0 || step == cfg.total_steps {
                let point = record.eval_trace.len() as u64;
                let ret = trainer.evaluate(env, eval_seed(point))?;
                check_return(ret, step as u64)?;
                record.eval_trace.push(EvalPoint {
                    step: step as u64,
                    mean_return: ret,
                });
                if !window_q.is_empty() {
                    record.q_trace.push(QPoint {
                        step: step as u64,
                        mean_q: window_q.iter().sum::<f64>() / window_q.len() as f64,
                    });
                    window_q.clear();
                }
            }
        }
        Ok(())
    })();

    if !recent_q.is_empty() {
        record.mean_q_last = Some(recent_q.iter().sum::<f64>() / recent_q.len() as f64);
    }
    record.final_alpha = trainer.alpha();
    match outcome {
        Ok(()) => {
            let returns: Vec<f64> = record.eval_trace.iter().map(|p| p.mean_return).collect();
            record.final_score = tail_mean(&returns, cfg.eval.tail_points);
        }
        Err(e @ BracError::Training { .. }) => {
            record.failed = true;
            record.failure = Some(e.to_string());
            record.final_score = 0.0;
        }
        Err(e) => return Err(e),
    }
    Ok(TrainedRun { record, trainer })
}

fn check_return(ret: f64, step: u64) -> Result<()> {
    if ret.is_finite() {
        Ok(())
    } else {
        Err(BracError::training("evaluate", step, "non-finite episode return"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collect;
    use crate::envs::{EnvName, ReferenceController};
    use crate::policies::{clone_behavior, CloneConfig};
    use crate::rng::standard_normal;

    fn tiny(algo: Algo, strength: f64) -> TrainerConfig {
        let mut cfg = TrainerConfig::preset(algo, strength, 2);
        cfg.policy_hidden = vec![16];
        cfg.q_hidden = vec![16];
        cfg.batch_size = 32;
        cfg.total_steps = 20;
        cfg.eval.episodes = 2;
        cfg.divergence.dual.hidden = vec![8];
        cfg.divergence.n_samples = 4;
        cfg.eval_interval = Some(5);
        cfg.q_window = 8;
        cfg
    }

    fn setup() -> (OfflineDataset, TanhGaussianPolicy) {
        let env = EnvName::PointMass2D.build();
        let ctrl = ReferenceController::new(EnvName::PointMass2D);
        let ds = collect(env.as_ref(), &ctrl, "gauss:0.3".parse().unwrap(), 600, &mut seeded(1)).unwrap();
        let cfg = CloneConfig {
            steps: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            hidden: vec![16],
        };
        let b = clone_behavior(&ds, &cfg, &mut seeded(2)).unwrap().policy;
        (ds, b)
    }

    fn random_batch(n: usize, seed: u64) -> Batch {
        let mut rng = seeded(seed);
        Batch {
            states: standard_normal(n, 4, &mut rng),
            actions: standard_normal(n, 2, &mut rng).map(|x| x.tanh() * 0.9),
            rewards: standard_normal(n, 1, &mut rng),
            next_states: standard_normal(n, 4, &mut rng),
            dones: Tensor::from_vec(n, 1, (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect()),
        }
    }

    #[test]
    fn adaptive_alpha_moves_with_the_gap() {
        let mut a = AdaptiveAlpha::new(1.0, 0.5, 0.01).unwrap();
        assert_eq!(a.update(0.5).unwrap(), 1.0);
        let up = a.update(0.9).unwrap();
        assert!(up > 1.0);
        let down = a.update(0.1).unwrap();
        assert!(down < up && down > 0.0);
        assert!(a.update(f64::NAN).is_err());
    }

    #[test]
    fn presets_parse_and_validate() {
        for algo in Algo::ALL {
            assert_eq!(algo.as_str().parse::<Algo>().unwrap(), algo);
            let s = algo.strength_grid()[0];
            let cfg = TrainerConfig::preset(algo, s, 2);
            cfg.validate().unwrap();
            assert_eq!(cfg.strength(), if algo == Algo::Sac { 2.0 } else { s });
        }
        assert!("td3".parse::<Algo>().is_err());
    }

    #[test]
    fn policy_regularization_targets_match_zero_alpha_value_penalty() {
        let (_, b) = setup();
        let batch = random_batch(16, 3);
        for kind in [Algo::KlPr, Algo::MmdPr, Algo::WPr, Algo::KldualPr] {
            let pr = tiny(kind, 3.0);
            let mut vp = pr.clone();
            vp.mode = Mode::ValuePenalty;
            vp.alpha_mode = AlphaMode::Fixed { alpha: 0.0 };
            let t1 = Trainer::new(pr, &b).unwrap().critic_targets(&batch).unwrap();
            let t2 = Trainer::new(vp, &b).unwrap().critic_targets(&batch).unwrap();
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn all_terminal_batches_target_the_rewards() {
        let (_, b) = setup();
        let mut batch = random_batch(8, 4);
        batch.dones = Tensor::filled(8, 1, 1.0);
        for algo in [Algo::KlVp, Algo::MmdVp, Algo::Bcq, Algo::Sac] {
            let mut t = Trainer::new(tiny(algo, 10.0), &b).unwrap();
            assert_eq!(t.critic_targets(&batch).unwrap(), batch.rewards);
        }
    }

    #[test]
    fn zero_alpha_actor_step_ignores_the_regularizer() {
        let (_, b) = setup();
        let batch = random_batch(16, 5);
        let mut kl = tiny(Algo::KlVp, 0.0);
        kl.divergence.n_samples = 3;
        let mut mmd = kl.clone();
        mmd.divergence = DivergenceConfig::new(DivergenceKind::Mmd);
        let mut t1 = Trainer::new(kl, &b).unwrap();
        let mut t2 = Trainer::new(mmd, &b).unwrap();
        t1.actor_update(&batch).unwrap();
        t2.actor_update(&batch).unwrap();
        // Same first draw, same Q gradient; the divergence term is scaled by 0.
        assert_eq!(t1.policy(), t2.policy());
    }

    #[test]
    fn large_alpha_kl_drives_the_divergence_down() {
        let (ds, b) = setup();
        let mut cfg = tiny(Algo::KlVp, 1e6);
        cfg.policy_lr = 1e-3;
        let mut t = Trainer::new(cfg, &b).unwrap();
        let batch = ds.gather(&(0..64).collect::<Vec<_>>());
        let (_, first) = t.actor_update(&batch).unwrap();
        let mut last = first;
        for _ in 0..500 {
            last = t.actor_update(&batch).unwrap().1;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn bcq_with_zero_phi_returns_behavior_candidates() {
        let (_, b) = setup();
        let mut cfg = tiny(Algo::Bcq, 0.0);
        cfg.bcq = Some(BcqConfig {
            phi: 0.0,
            n_candidates: 1,
        });
        let t = Trainer::new(cfg, &b).unwrap();
        let states = standard_normal(6, 4, &mut seeded(6));
        let picked = bcq_select(t.bcq().unwrap(), t.critic(), &b, &states, &mut seeded(7)).unwrap();
        let direct = b.sample(&states, 1, &mut seeded(7)).unwrap().actions;
        assert_eq!(picked, direct);
    }

    #[test]
    fn bcq_prefers_the_higher_q_candidate_and_is_scale_invariant() {
        let (_, b) = setup();
        let mut cfg = tiny(Algo::Bcq, 0.0);
        cfg.bcq = Some(BcqConfig {
            phi: 0.0,
            n_candidates: 2,
        });
        cfg.k = 1;
        let mut t = Trainer::new(cfg, &b).unwrap();
        // Q(s, a) = a_0: the candidate with the larger first coordinate wins.
        let mut q = Mlp::zeros(&[6, 1]).unwrap();
        q.params_mut()[0].data_mut()[4] = 1.0;
        *t.critic_mut() = QEnsemble::from_sources(vec![q.clone()], 0.005).unwrap();
        let states = standard_normal(5, 4, &mut seeded(8));
        let picked = bcq_select(t.bcq().unwrap(), t.critic(), &b, &states, &mut seeded(9)).unwrap();
        let cands = b.sample(&states, 2, &mut seeded(9)).unwrap().actions;
        for i in 0..5 {
            let best = if cands.get(2 * i + 1, 0) > cands.get(2 * i, 0) { 2 * i + 1 } else { 2 * i };
            assert_eq!(picked.row(i), cands.row(best));
        }
        q.params_mut()[0].data_mut()[4] = 7.5;
        *t.critic_mut() = QEnsemble::from_sources(vec![q], 0.005).unwrap();
        let scaled = bcq_select(t.bcq().unwrap(), t.critic(), &b, &states, &mut seeded(9)).unwrap();
        assert_eq!(picked, scaled);
    }

    #[test]
    fn perturbation_stays_within_phi() {
        let (_, b) = setup();
        let t = Trainer::new(tiny(Algo::Bcq, 0.05), &b).unwrap();
        let mut rng = seeded(10);
        let s = standard_normal(50, 4, &mut rng);
        let a = Tensor::zeros(50, 2);
        let moved = t.bcq().unwrap().perturb(&s, &a).unwrap();
        assert!(moved.data().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn zero_steps_gives_a_single_evaluation() {
        let (ds, b) = setup();
        let env = EnvName::PointMass2D.build();
        let mut cfg = tiny(Algo::KlVp, 1.0);
        cfg.total_steps = 0;
        let run = train_offline(cfg, &ds, &b, env.as_ref()).unwrap();
        assert_eq!(run.record.eval_trace.len(), 1);
        assert_eq!(run.record.final_score, run.record.eval_trace[0].mean_return);
        assert!(run.record.q_trace.is_empty() && run.record.mean_q_last.is_none());
    }

    #[test]
    fn runs_are_deterministic_and_well_formed() {
        let (ds, b) = setup();
        let env = EnvName::PointMass2D.build();
        for algo in Algo::ALL {
            let grid = algo.strength_grid();
            let cfg = tiny(algo, grid[grid.len() / 2]);
            let r1 = train_offline(cfg.clone(), &ds, &b, env.as_ref()).unwrap().record;
            let r2 = train_offline(cfg, &ds, &b, env.as_ref()).unwrap().record;
            assert_eq!(r1, r2, "{algo}");
            assert!(!r1.failed, "{algo}: {:?}", r1.failure);
            let steps: Vec<u64> = r1.eval_trace.iter().map(|p| p.step).collect();
            assert_eq!(steps, vec![0, 5, 10, 15, 20], "{algo}");
            if algo == Algo::Bc {
                assert!(r1.q_trace.is_empty());
            } else {
                assert_eq!(r1.q_trace.len(), 4, "{algo}");
            }
        }
    }

    #[test]
    fn divergence_becomes_a_failed_record() {
        let (ds, b) = setup();
        let env = EnvName::PointMass2D.build();
        let mut cfg = tiny(Algo::KlVp, 1.0);
        cfg.q_lr = 1e300;
        cfg.policy_lr = 1e300;
        let run = train_offline(cfg, &ds, &b, env.as_ref()).unwrap();
        assert!(run.record.failed);
        assert_eq!(run.record.final_score, 0.0);
        assert!(run.record.failure.is_some());
    }
}
