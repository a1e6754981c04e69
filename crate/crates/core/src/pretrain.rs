//! Online SAC run that stops once the policy is "partially trained": its
//! return sits between the uniform-random and reference-controller returns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::envs::{EnvName, Episode, ReferenceController, UniformRandom};
use crate::error::{BracError, Result};
use crate::harness::{evaluate, EvalProtocol};
use crate::policies::TanhGaussianPolicy;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::trainer::{Algo, Trainer, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Accepted band for `(R − R_random) / (R_controller − R_random)`.
    pub target_low: f64,
    pub target_high: f64,
    pub max_env_steps: usize,
    /// Uniform-random steps before learning starts.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            target_low: 0.4,
            target_high: 0.6,
            max_env_steps: 100_000,
            warmup_steps: 1_000,
            eval_every: 500,
            eval_episodes: 20,
            hidden: vec![64, 64],
            batch_size: 128,
            learning_rate: 3e-4,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.target_low && self.target_low <= self.target_high) {
            return Err(BracError::Config("pretrain band must satisfy 0 <= low <= high".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 || self.batch_size == 0 {
            return Err(BracError::Config("eval interval, episodes and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub policy: TanhGaussianPolicy,
    pub normalized: f64,
    pub policy_return: f64,
    pub random_return: f64,
    pub controller_return: f64,
    pub env_steps: usize,
    /// Whether the final score landed inside the target band.
    pub in_band: bool,
}

/// Normalized score of `ret` between the two anchors.
pub fn normalized_score(ret: f64, random: f64, controller: f64) -> f64 {
    (ret - random) / (controller - random)
}

/// Trains SAC online until the stochastic policy's normalized return
/// reaches `target_low`, or `max_env_steps` runs out.
pub fn pretrain_online(env_name: EnvName, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let env = env_name.build();
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let protocol = EvalProtocol {
        episodes: cfg.eval_episodes,
        ..EvalProtocol::default()
    };
    let anchor_seed = derive_seed(cfg.seed, &[1]);
    let random_return = evaluate(env.as_ref(), &UniformRandom::for_env(env.as_ref()), &protocol, anchor_seed)?;
    let controller_return =
        evaluate(env.as_ref(), &ReferenceController::new(env_name), &protocol, anchor_seed)?;
    if !(controller_return > random_return) {
        return Err(BracError::Config("reference controller does not beat random actions".into()));
    }

    let mut sac = TrainerConfig::preset(Algo::Sac, 0.0, ad);
    sac.policy_hidden = cfg.hidden.clone();
    sac.q_hidden = cfg.hidden.clone();
    sac.policy_lr = cfg.learning_rate;
    sac.q_lr = cfg.learning_rate;
    sac.batch_size = cfg.batch_size;
    sac.seed = derive_seed(cfg.seed, &[2]);
    // Entropy regularization never consults the behavior model; it only
    // supplies dimensions and bounds.
    let shape = TanhGaussianPolicy::new(sd, &[1], env.action_low(), env.action_high(), &mut seeded(0))?;
    let mut trainer = Trainer::new(sac, &shape)?;

    let mut buffer = OfflineDataset::new(env_name.as_str(), "online", sd, ad);
    let random = UniformRandom::for_env(env.as_ref());
    let mut act_rng = seeded(derive_seed(cfg.seed, &[3]));
    let mut episode = Episode::new(env.as_ref(), act_rng.gen());
    let mut last = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for step in 1..=cfg.max_env_steps {
        let s = episode.state().to_vec();
        let a = if step <= cfg.warmup_steps {
            random.draw(&mut act_rng)
        } else {
            let st = Tensor::from_vec(1, sd, s.clone());
            trainer.policy().sample(&st, 1, &mut act_rng)?.actions.into_data()
        };
        let out = episode.step(&a);
        buffer.push(&s, &a, out.reward, &out.next_state, out.done)?;
        if out.done {
            episode = Episode::new(env.as_ref(), act_rng.gen());
        }
        if step > cfg.warmup_steps {
            trainer.train_step(&buffer)?;
            if step % cfg.eval_every == 0 {
                let ret = evaluate(env.as_ref(), trainer.policy(), &protocol, derive_seed(cfg.seed, &[4, step as u64]))?;
                let norm = normalized_score(ret, random_return, controller_return);
                log::info!("pretrain step {step}: return {ret:.3}, normalized {norm:.3}");
                last = (ret, norm);
                if norm >= cfg.target_low {
                    return Ok(PretrainOutcome {
                        policy: trainer.policy().clone(),
                        normalized: norm,
                        policy_return: ret,
                        random_return,
                        controller_return,
                        env_steps: step,
                        in_band: norm <= cfg.target_high,
                    });
                }
            }
        }
    }
    Ok(PretrainOutcome {
        policy: trainer.policy().clone(),
        normalized: last.1,
        policy_return: last.0,
        random_return,
        controller_return,
        env_steps: cfg.max_env_steps,
        in_band: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_anchors() {
        assert_eq!(normalized_score(-100.0, -100.0, -20.0), 0.0);
        assert_eq!(normalized_score(-20.0, -100.0, -20.0), 1.0);
        assert_eq!(normalized_score(-60.0, -100.0, -20.0), 0.5);
    }

    #[test]
    fn bad_band_is_rejected() {
        let cfg = PretrainConfig {
            target_low: 0.7,
            target_high: 0.6,
            ..PretrainConfig::default()
        };
        assert!(pretrain_online(EnvName::PointMass2D, &cfg).is_err());
    }
}
