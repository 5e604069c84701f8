//! TD3-style actor-critic learning shared by the filter and control agents.

mod agent;
mod buffer;
mod noise;
mod nstep;

pub use agent::{
    nstep_target, perturb, random_action, ActionHead, AgentBundle, AgentConfig, UpdateStats,
};
pub use buffer::{sample_union, Batch, ReplayBuffer, StoredTransition};
pub use noise::{sample_noise_scale, PinkNoise, DEFAULT_PINK_BLOCK};
pub use nstep::{nstep_return, NStepAccumulator};
