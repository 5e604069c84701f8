//! Physics environments with explicit failure sets, the slope-car viability
//! oracle, LQR design and prior-data generation.

mod cartpole;
mod io;
mod lqr;
mod prior;
mod slopecar;
mod viability;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cartpole::{
    accelerations, cartpole_failure, cartpole_step, goal_reward, mechanical_energy, CartPole,
    CartPoleParams, CartPoleState,
};
pub use io::{
    read_transition_log, write_transition_csv, write_transition_log, TRANSITION_CSV_SCHEMA,
    TRANSITION_LOG_MAGIC,
};
pub use lqr::{
    cartpole_lqr_gain, default_prior_controller, linearize, lqr_controller, lqr_gain, spectral_radius,
    LinearFeedback,
};
pub use prior::{generate_prior_data, Controller, PriorDataConfig, RandomController};
pub use slopecar::{
    grade_pull, slopecar_failure, slopecar_step, steps_survived_braking, SlopeCar, SlopeCarParams,
    SlopeCarState,
};
pub use viability::{
    viability_margin, viability_oracle, viable_position_bound, ViabilityGrid, ViabilityGridSpec,
};

use crate::error::{Error, Result};

/// Seedable generator used for every stochastic draw in the engine.
pub type SimRng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    /// Actions live in `[-1, 1]^action_dim`.
    pub action_dim: usize,
    pub max_episode_steps: usize,
}

/// A fully observed environment with a known failure set.
///
/// `step_mean` is the noise-free transition; `step` adds process noise.
pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn step_mean(&self, s: &[f64], a: &[f64]) -> Vec<f64>;
    fn step(&self, s: &[f64], a: &[f64], rng: &mut SimRng) -> Vec<f64>;
    fn is_failure(&self, s: &[f64]) -> bool;
    fn reward(&self, s: &[f64], a: &[f64], next: &[f64]) -> f64;
    fn sample_initial(&self, rng: &mut SimRng) -> Vec<f64>;
    /// Equilibrium used for LQR design of the prior-data controller.
    fn linearization_point(&self) -> Vec<f64>;

    fn is_safe(&self, s: &[f64]) -> bool {
        !self.is_failure(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    CartPole,
    SlopeCar,
}

impl EnvId {
    pub fn make(self, max_episode_steps: usize) -> Box<dyn Env> {
        match self {
            EnvId::CartPole => Box::new(CartPole::new(CartPoleParams::default(), max_episode_steps)),
            EnvId::SlopeCar => Box::new(SlopeCar::new(SlopeCarParams::default(), max_episode_steps)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::SlopeCar => "slopecar",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cartpole" => Ok(EnvId::CartPole),
            "slopecar" => Ok(EnvId::SlopeCar),
            _ => Err(Error::Config(format!("unknown environment `{s}` (expected cartpole or slopecar)"))),
        }
    }
}

/// One real or simulated step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    /// Entered the failure set (or left the certain set in model rollouts).
    pub terminated: bool,
    /// Cut off by the horizon or the information budget.
    pub truncated: bool,
}

impl Transition {
    pub fn episode_ends(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Elementwise clamp to the action box.
pub fn clip_action(a: &mut [f64]) {
    for x in a {
        *x = x.clamp(-1.0, 1.0);
    }
}
