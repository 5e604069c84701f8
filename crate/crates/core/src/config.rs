//! Run configuration: hyperparameters, profiles, overrides and ablations.
//!
//! Configs are TOML. A file only needs the keys it changes; everything else
//! comes from the selected profile. `paper` carries the published CartPole
//! hyperparameters, `desk` shrinks networks, batches and rollout counts so a
//! full run fits on one CPU core.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::model::EnsembleConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub steps: usize,
    /// Pink-noise scale on the stabilizing controller.
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Parallel model rollouts `RO^SF`.
    pub rollouts: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub lr: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub policy_delay: usize,
    /// Action regularization factor `c`.
    pub c: f64,
    /// Pink-noise behavior scale.
    pub sigma3: f64,
    /// Exploration scale around the previous control policy.
    pub sigma2: f64,
    /// Target smoothing scale.
    pub sigma4: f64,
    pub gamma_sf: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub nu3: f64,
    pub nu4: f64,
    pub nu5: f64,
    pub eval_rollouts: usize,
    pub mtf_early: usize,
    pub mtf_late: usize,
    pub mtf_num: usize,
    pub n_step: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_init_scale: f64,
    /// Vectorized rollout steps per training round.
    pub steps_per_round: usize,
    /// Gradient updates after each vectorized rollout step.
    pub updates_per_step: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Train/evaluate rounds before the run is aborted.
    pub max_rounds: usize,
    /// Relative improvement of the mean evaluation length below which
    /// training has plateaued.
    pub plateau_tolerance: f64,
    /// Mean evaluation length required to pass, as a fraction of the horizon.
    pub pass_fraction: f64,
    /// Return quantile a truncated trajectory must reach to feed `T_G`.
    pub tg_return_quantile: f64,
    /// Critic time-to-failure proxy required for `T_G`, as a fraction of the
    /// horizon.
    pub tg_ttf_fraction: f64,
    /// Capacity of each trajectory store.
    pub store_capacity: usize,
    /// Share of `ρ0` in the evaluation start-state mixture; the rest is `T_G`.
    pub eval_rho0_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Model rollouts per rollout phase.
    pub rollouts: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub lr: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub sigma2: f64,
    pub sigma4: f64,
    pub gamma: f64,
    /// Environment interactions per iteration.
    pub env_steps: usize,
    pub batch_size: usize,
    pub buffer_size: usize,
    /// Environment steps between model-rollout phases.
    pub rollout_every: usize,
    pub rollout_horizon: usize,
    pub updates_per_step: usize,
    pub warmup: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_init_scale: f64,
    /// Greedy evaluation episodes after each iteration.
    pub eval_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    pub no_regularization: bool,
    pub no_start_state_shaping: bool,
    pub raw_hyperplane: bool,
    pub disable_filter: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvId,
    pub profile: Profile,
    pub seed: u64,
    /// Outer iterations `J`.
    pub iterations: usize,
    pub episode_steps: usize,
    pub prior: PriorConfig,
    pub model: EnsembleConfig,
    pub filter: FilterConfig,
    pub control: ControlConfig,
    pub ablation: Ablations,
}

fn paper_filter() -> FilterConfig {
    FilterConfig {
        rollouts: 100,
        sigma_min: 0.001,
        sigma_max: 0.3,
        zeta1: 0.99,
        zeta2: 0.01,
        lr: 3e-4,
        buffer_size: 1_000_000,
        batch_size: 100_000,
        tau: 0.001,
        policy_delay: 2,
        c: 0.1,
        sigma3: 0.33,
        sigma2: 0.1,
        sigma4: 0.003,
        gamma_sf: 0.99,
        nu1: 0.05,
        nu2: 0.3,
        nu3: 0.65,
        nu4: 0.5,
        nu5: 0.5,
        eval_rollouts: 2000,
        mtf_early: 10,
        mtf_late: 50,
        mtf_num: 10,
        n_step: 3,
        actor_hidden: vec![256, 256],
        critic_hidden: vec![256, 256],
        actor_init_scale: 0.1,
        steps_per_round: 5000,
        updates_per_step: 1,
        warmup: 10_000,
        max_rounds: 5,
        plateau_tolerance: 0.02,
        pass_fraction: 0.9,
        tg_return_quantile: 0.5,
        tg_ttf_fraction: 0.8,
        store_capacity: 10_000,
        eval_rho0_share: 0.5,
    }
}

fn paper_control() -> ControlConfig {
    ControlConfig {
        rollouts: 100,
        sigma_min: 0.001,
        sigma_max: 0.2,
        zeta1: 0.99,
        zeta2: 0.01,
        lr: 3e-4,
        tau: 0.001,
        policy_delay: 2,
        sigma2: 0.1,
        sigma4: 0.003,
        gamma: 0.99,
        env_steps: 40_000,
        batch_size: 256,
        buffer_size: 1_000_000,
        rollout_every: 250,
        rollout_horizon: 50,
        updates_per_step: 1,
        warmup: 1000,
        actor_hidden: vec![256, 256],
        critic_hidden: vec![256, 256],
        actor_init_scale: 0.1,
        eval_episodes: 10,
    }
}

impl RunConfig {
    pub fn new(env: EnvId, profile: Profile) -> Self {
        let paper = Self {
            env,
            profile,
            seed: 0,
            iterations: 3,
            episode_steps: 200,
            prior: PriorConfig {
                steps: 30_000,
                noise_sigma: 0.3,
            },
            model: EnsembleConfig::default(),
            filter: paper_filter(),
            control: paper_control(),
            ablation: Ablations::default(),
        };
        match profile {
            Profile::Paper => paper,
            Profile::Desk => paper.into_desk(),
        }
    }

    fn into_desk(mut self) -> Self {
        let m = &mut self.model;
        m.members = 5;
        m.hidden = vec![64, 64, 64];
        m.lr = 2e-3;
        m.patience = 5;
        m.max_epochs = 40;
        m.max_epoch_steps = 600;
        m.max_holdout = 2000;
        let f = &mut self.filter;
        f.rollouts = 64;
        f.batch_size = 256;
        f.buffer_size = 200_000;
        f.tau = 0.005;
        f.lr = 1e-3;
        f.eval_rollouts = 200;
        f.actor_hidden = vec![64, 64];
        f.critic_hidden = vec![128, 128];
        f.steps_per_round = 1500;
        f.warmup = 2000;
        let c = &mut self.control;
        c.rollouts = 32;
        c.tau = 0.005;
        c.lr = 1e-3;
        c.batch_size = 128;
        c.buffer_size = 200_000;
        c.rollout_every = 500;
        c.rollout_horizon = 25;
        c.updates_per_step = 1;
        c.actor_hidden = vec![64, 64];
        c.critic_hidden = vec![128, 128];
        self
    }

    /// Parse a TOML file on top of the profile it names (default `desk`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let env = match table.get("env") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("`env` must be a string".into()))?
                .parse()?,
            None => EnvId::CartPole,
        };
        let profile = match table.get("profile") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("`profile` must be a string".into()))?
                .parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::new(env, profile);
        let mut leaves = Vec::new();
        flatten("", &toml::Value::Table(table), &mut leaves);
        for (key, value) in leaves {
            if key != "env" && key != "profile" {
                cfg.set_value(&key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value` with a dotted key, e.g. `filter.c=0.5`. The value is
    /// read as a TOML literal, falling back to a bare string.
    pub fn set_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        self.set_value(key, parsed)?;
        self.validate()
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        }
        // integers are accepted where floats are expected
        *node = match (&*node, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad value for `{key}`: {}", e.message())))?;
        Ok(())
    }

    /// Turn on an ablation by its command-line name.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no-regularization" | "disable-regularization" => {
                self.ablation.no_regularization = true;
                self.filter.c = 0.0;
            }
            "no-start-state-shaping" | "disable-start-state-shaping" => {
                self.ablation.no_start_state_shaping = true;
                (self.filter.nu1, self.filter.nu2, self.filter.nu3) = (1.0, 0.0, 0.0);
            }
            "raw-hyperplane-parametrization" | "raw-hyperplane" => self.ablation.raw_hyperplane = true,
            "disable-filter" | "no-filter" => self.ablation.disable_filter = true,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation `{name}` (expected no-regularization, no-start-state-shaping, \
                     raw-hyperplane-parametrization or disable-filter)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.filter;
        let c = &self.control;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0 < f.gamma_sf && f.gamma_sf < 1.0) || !(0.0 < c.gamma && c.gamma < 1.0) {
            return bad("discount factors must lie in (0, 1)");
        }
        let nus = [f.nu1, f.nu2, f.nu3];
        if nus.iter().any(|&v| v < 0.0) || (nus.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("filter.nu1..nu3 must be non-negative and sum to 1");
        }
        if f.nu4 < 0.0 || f.nu5 < 0.0 || (f.nu4 + f.nu5 - 1.0).abs() > 1e-9 {
            return bad("filter.nu4 and filter.nu5 must be non-negative and sum to 1");
        }
        if f.mtf_early >= f.mtf_late {
            return bad("filter.mtf_early must be smaller than filter.mtf_late");
        }
        if f.sigma_min > f.sigma_max || c.sigma_min > c.sigma_max {
            return bad("sigma_min must not exceed sigma_max");
        }
        for (z1, z2) in [(f.zeta1, f.zeta2), (c.zeta1, c.zeta2)] {
            if !(0.0 < z2 && z2 < z1 && z1 <= 1.0) {
                return bad("quantiles must satisfy 0 < zeta2 < zeta1 <= 1");
            }
        }
        if f.n_step == 0 || f.policy_delay == 0 || c.policy_delay == 0 {
            return bad("n_step and policy_delay must be positive");
        }
        if self.episode_steps == 0 || f.rollouts == 0 || f.max_rounds == 0 {
            return bad("episode_steps, filter.rollouts and filter.max_rounds must be positive");
        }
        if !(0.0..=1.0).contains(&f.eval_rho0_share) || !(0.0..=1.0).contains(&f.tg_return_quantile) {
            return bad("shares and quantiles must lie in [0, 1]");
        }
        if self.model.members < 2 {
            return bad("model.members must be at least 2");
        }
        Ok(())
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.clone())),
    }
}
