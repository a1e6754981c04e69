//! TOML experiment settings and environment-variable overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use brac_core::policies::CloneConfig;
use brac_core::pretrain::PretrainConfig;
use brac_core::trainer::TrainerConfig;
use serde::Deserialize;

pub const SEED_VAR: &str = "BRAC_SEED";
pub const OUT_DIR_VAR: &str = "BRAC_OUT_DIR";

/// Trainer fields a config file may set; anything absent keeps the
/// algorithm preset.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerOverrides {
    pub total_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub policy_hidden: Option<Vec<usize>>,
    pub q_hidden: Option<Vec<usize>>,
    pub gamma: Option<f64>,
    pub q_lr: Option<f64>,
    pub policy_lr: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub eval_interval: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub eval_action_samples: Option<usize>,
    pub divergence_samples: Option<usize>,
    pub mmd_sigma: Option<f64>,
    pub dual_hidden: Option<Vec<usize>>,
    pub dual_learning_rate: Option<f64>,
    pub dual_inner_steps: Option<usize>,
    pub q_window: Option<usize>,
}

impl TrainerOverrides {
    pub fn apply(&self, cfg: &mut TrainerConfig) {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(total_steps => total_steps);
        set!(batch_size => batch_size);
        set!(policy_hidden => policy_hidden);
        set!(q_hidden => q_hidden);
        set!(gamma => gamma);
        set!(q_lr => q_lr);
        set!(policy_lr => policy_lr);
        set!(tau => tau);
        set!(k => k);
        set!(eval_episodes => eval.episodes);
        set!(eval_action_samples => eval.action_samples);
        set!(divergence_samples => divergence.n_samples);
        set!(mmd_sigma => divergence.mmd_sigma);
        set!(dual_hidden => divergence.dual.hidden);
        set!(dual_learning_rate => divergence.dual.learning_rate);
        set!(dual_inner_steps => divergence.dual.inner_steps);
        set!(q_window => q_window);
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = Some(v);
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloneOverrides {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub hidden: Option<Vec<usize>>,
}

impl CloneOverrides {
    pub fn apply(&self, cfg: &mut CloneConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = v.clone();
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub trainer: TrainerOverrides,
    #[serde(default)]
    pub clone: CloneOverrides,
    pub pretrain: Option<PretrainConfig>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Flag, then `BRAC_SEED`, then the config file, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_VAR) {
            return v.trim().parse().with_context(|| format!("{SEED_VAR}={v:?} is not an integer"));
        }
        Ok(self.seed.unwrap_or(0))
    }
}

/// Relative output paths live under `BRAC_OUT_DIR` when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_VAR) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}
