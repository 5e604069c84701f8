//! Start-state and behavior-policy mixtures, trajectory stores and MTF
//! harvesting.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::model::nearest_rank_quantile;

/// FIFO store of states harvested from model rollouts.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryStore {
    states: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl TrajectoryStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            states: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, s: Vec<f64>) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.states.iter()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Option<&Vec<f64>> {
        if self.states.is_empty() {
            None
        } else {
            Some(&self.states[rng.random_range(0..self.states.len())])
        }
    }
}

/// Episode-initial states of a transition log.
pub fn initial_states(data: &[Transition]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut fresh = true;
    for t in data {
        if fresh {
            out.push(t.s.clone());
        }
        fresh = t.episode_ends();
    }
    out
}

/// `ν1 ρ0 + ν2 U(T_F) + ν3 U(T_G)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartStateMixture {
    pub weights: [f64; 3],
}

/// Which source a start state came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartSource {
    Initial,
    Failed,
    HighReturn,
}

impl StartStateMixture {
    pub fn new(nu1: f64, nu2: f64, nu3: f64) -> Result<Self> {
        let w = [nu1, nu2, nu3];
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("start-state weights {w:?} must be non-negative and sum to 1")));
        }
        Ok(Self { weights: w })
    }

    /// Weights after dropping empty sources and renormalizing the rest.
    pub fn effective_weights(&self, available: [bool; 3]) -> Result<[f64; 3]> {
        let mut w = self.weights;
        for (wi, &ok) in w.iter_mut().zip(&available) {
            if !ok {
                *wi = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::Training("no non-empty start-state source with positive weight".into()));
        }
        Ok(w.map(|v| v / total))
    }

    pub fn sample(
        &self,
        rho0: &[Vec<f64>],
        failed: &TrajectoryStore,
        high_return: &TrajectoryStore,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, StartSource)> {
        let w = self.effective_weights([!rho0.is_empty(), !failed.is_empty(), !high_return.is_empty()])?;
        let x: f64 = rng.random();
        let source = if x < w[0] {
            StartSource::Initial
        } else if x < w[0] + w[1] || w[2] == 0.0 {
            StartSource::Failed
        } else {
            StartSource::HighReturn
        };
        let s = match source {
            StartSource::Initial if !rho0.is_empty() => rho0[rng.random_range(0..rho0.len())].clone(),
            StartSource::Failed if !failed.is_empty() => failed.sample(rng).cloned().unwrap_or_default(),
            StartSource::HighReturn => high_return.sample(rng).cloned().unwrap_or_default(),
            // rounding at the interval edge landed on an empty source
            _ => return self.sample(rho0, failed, high_return, rng),
        };
        Ok((s, source))
    }
}

/// Behavior branch of a filter rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BehaviorBranch {
    /// Previous control policy plus `σ2` pink noise.
    Policy,
    /// `σ3` pink noise alone.
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicyMixture {
    pub nu4: f64,
    pub nu5: f64,
}

impl BehaviorPolicyMixture {
    pub fn new(nu4: f64, nu5: f64) -> Result<Self> {
        if nu4 < 0.0 || nu5 < 0.0 || (nu4 + nu5 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("behavior weights ({nu4}, {nu5}) must be non-negative and sum to 1")));
        }
        Ok(Self { nu4, nu5 })
    }

    pub fn choose(&self, rng: &mut impl Rng) -> BehaviorBranch {
        if rng.random::<f64>() < self.nu4 {
            BehaviorBranch::Policy
        } else {
            BehaviorBranch::Noise
        }
    }
}

/// Maximum-time-to-failure window for harvesting near-failure states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtfConfig {
    pub early: usize,
    pub late: usize,
    pub num: usize,
}

impl MtfConfig {
    /// Distinct state indices drawn from `[T − late, T − early]` (clamped at
    /// 0) for a trajectory that failed at time `terminal`.
    pub fn window(&self, terminal: usize, rng: &mut impl Rng) -> Vec<usize> {
        if terminal < self.early {
            return Vec::new();
        }
        let hi = terminal - self.early;
        let lo = terminal.saturating_sub(self.late);
        let width = hi - lo + 1;
        let k = self.num.min(width);
        let mut idx: Vec<usize> = sample_indices(rng, width, k).into_iter().map(|i| lo + i).collect();
        idx.sort_unstable();
        idx
    }
}

/// Return threshold for `T_G`: the configured quantile of the returns of
/// the truncated trajectories in one evaluation batch.
pub fn return_threshold(returns: &[f64], quantile: f64) -> Option<f64> {
    if returns.is_empty() {
        return None;
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(nearest_rank_quantile(&sorted, quantile.max(f64::MIN_POSITIVE)))
}

/// A truncated trajectory state enters `T_G` when its trajectory return
/// reaches the batch threshold and the critic's time-to-failure proxy
/// reaches `ttf_min` steps.
pub fn admits_high_return(ret: f64, threshold: f64, ttf: f64, ttf_min: f64) -> bool {
    ret >= threshold && ttf >= ttf_min
}
