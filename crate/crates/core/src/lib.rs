//! Safe model-based reinforcement learning with learned hyperplane safety
//! filters.
//!
//! The engine jointly learns three things from a small amount of prior data:
//! a probabilistic-ensemble dynamics model whose disagreement defines where
//! model rollouts can be trusted, a *filter policy* that maps each state to a
//! halfspace of admissible actions, and a *control policy* whose proposals are
//! projected into that halfspace before they reach the real system.
//!
//! Module map:
//!
//! * [`approx`] – dense networks, analytic gradients, Adam, Polyak averaging
//! * [`env`] – CartPole and slope-car physics, viability oracle, prior data
//! * [`model`] – ensemble training, epistemic entropy, certain-set thresholds
//! * [`filter`] – hyperplane parametrization, action projection, filter reward
//! * [`rl`] – TD3-style learner, replay buffers, pink exploration noise
//! * [`orchestrator`] – the outer learning loop and its data shaping
//! * [`config`], [`checkpoint`], [`metrics`] – run plumbing used by the CLI

pub mod approx;
pub mod checkpoint;
pub mod config;
pub mod env;
mod error;
pub mod filter;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod rl;

pub use error::{Error, Result};
