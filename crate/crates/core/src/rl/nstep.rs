//! n-step return aggregation.

use std::collections::VecDeque;

use super::buffer::StoredTransition;

/// Discounted reward sum and bootstrap discount of a window that starts at
/// its first element. Summation stops at the first terminal step, in which
/// case the bootstrap discount is zero.
pub fn nstep_return(rewards: &[f64], terminal: &[bool], gamma: f64) -> (f64, f64) {
    let mut ret = 0.0;
    let mut g = 1.0;
    for (r, &done) in rewards.iter().zip(terminal) {
        ret += g * r;
        g *= gamma;
        if done {
            return (ret, 0.0);
        }
    }
    (ret, g)
}

/// Streams single steps of one episode and emits n-step entries. Windows
/// never cross an episode boundary.
#[derive(Clone, Debug)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    window: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1, "n-step length must be at least 1");
        Self {
            n,
            gamma,
            window: VecDeque::with_capacity(n),
        }
    }

    pub fn pending(&self) -> usize {
        self.window.len()
    }

    /// Adds `(s, a, r, s_next)`. On `terminated` or `truncated` the window is
    /// flushed; truncation bootstraps from `s_next`, termination does not.
    pub fn push(
        &mut self,
        s: &[f64],
        a: &[f64],
        r: f64,
        s_next: &[f64],
        terminated: bool,
        truncated: bool,
        out: &mut Vec<StoredTransition>,
    ) {
        self.window.push_back((s.to_vec(), a.to_vec(), r));
        if terminated || truncated {
            while !self.window.is_empty() {
                out.push(self.emit(s_next, terminated));
                self.window.pop_front();
            }
        } else if self.window.len() == self.n {
            out.push(self.emit(s_next, false));
            self.window.pop_front();
        }
    }

    /// Drop a partial window without emitting (e.g. when a rollout is
    /// abandoned).
    pub fn clear(&mut self) {
        self.window.clear();
    }

    fn emit(&self, s_boot: &[f64], terminated: bool) -> StoredTransition {
        let (s, a, _) = &self.window[0];
        let mut ret = 0.0;
        let mut g = 1.0;
        for (_, _, r) in &self.window {
            ret += g * r;
            g *= self.gamma;
        }
        StoredTransition {
            s: s.clone(),
            a: a.clone(),
            ret,
            s_boot: s_boot.to_vec(),
            discount: if terminated { 0.0 } else { g },
        }
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn nstep_return_matches_the_explicit_sum(
            rewards in prop::collection::vec(-10.0f64..10.0, 1..8),
            stop in prop::option::of(0usize..8),
            gamma in 0.0f64..1.0,
        ) {
            let terminal: Vec<bool> = (0..rewards.len()).map(|i| Some(i) == stop).collect();
            let (ret, disc) = nstep_return(&rewards, &terminal, gamma);
            let end = stop.filter(|&k| k < rewards.len()).map_or(rewards.len(), |k| k + 1);
            let want: f64 = rewards[..end].iter().enumerate().map(|(k, r)| gamma.powi(k as i32) * r).sum();
            prop_assert!((ret - want).abs() < 1e-9);
            let want_disc = if end < rewards.len() || terminal[end - 1] { 0.0 } else { gamma.powi(end as i32) };
            prop_assert!((disc - want_disc).abs() < 1e-12);
        }
    }
}
