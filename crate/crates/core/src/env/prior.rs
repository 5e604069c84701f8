//! Prior data from a perturbed stabilizing controller.

use rand::{Rng, SeedableRng};

use super::{clip_action, Env, LinearFeedback, SimRng, Transition};
use crate::rl::PinkNoise;

/// Deterministic state feedback used as the nominal prior-data policy.
pub trait Controller {
    fn act(&self, s: &[f64]) -> Vec<f64>;
}

impl Controller for LinearFeedback {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        LinearFeedback::act(self, s)
    }
}

/// Always proposes zero; every even step is then pure pink noise.
#[derive(Clone, Debug)]
pub struct RandomController {
    pub action_dim: usize,
}

impl Controller for RandomController {
    fn act(&self, _s: &[f64]) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorDataConfig {
    pub n_steps: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Rolls out `controller` for `n_steps` real transitions. Within each episode
/// even-indexed steps use `clip(controller(s) + pink noise)` and odd-indexed
/// steps a uniform random action. Episodes restart on failure or at the
/// horizon.
pub fn generate_prior_data(env: &dyn Env, controller: &dyn Controller, cfg: &PriorDataConfig) -> Vec<Transition> {
    let mut out = Vec::with_capacity(cfg.n_steps);
    if cfg.n_steps == 0 {
        return out;
    }
    let spec = env.spec().clone();
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut noise = PinkNoise::new(spec.action_dim, cfg.noise_sigma, rng.random());
    let mut s = env.sample_initial(&mut rng);
    let mut t = 0usize;
    while out.len() < cfg.n_steps {
        let a = if t % 2 == 0 {
            let mut a = controller.act(&s);
            for (x, n) in a.iter_mut().zip(noise.sample()) {
                *x += n;
            }
            clip_action(&mut a);
            a
        } else {
            (0..spec.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
        };
        let s_next = env.step(&s, &a, &mut rng);
        let r = env.reward(&s, &a, &s_next);
        let terminated = env.is_failure(&s_next);
        t += 1;
        let truncated = !terminated && t >= spec.max_episode_steps;
        out.push(Transition {
            s: s.clone(),
            a,
            s_next: s_next.clone(),
            r,
            terminated,
            truncated,
        });
        if terminated || truncated {
            s = env.sample_initial(&mut rng);
            noise.reset();
            t = 0;
        } else {
            s = s_next;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{cartpole_lqr_gain, CartPole};

    fn cartpole_data(n: usize, seed: u64) -> Vec<Transition> {
        let env = CartPole::default();
        let ctl = cartpole_lqr_gain(&env).unwrap();
        generate_prior_data(
            &env,
            &ctl,
            &PriorDataConfig {
                n_steps: n,
                noise_sigma: 0.3,
                seed,
            },
        )
    }

    #[test]
    fn zero_steps_is_empty() {
        assert!(cartpole_data(0, 0).is_empty());
    }

    #[test]
    fn reproducible_under_seed() {
        let a = cartpole_data(3000, 4);
        let b = cartpole_data(3000, 4);
        assert_eq!(a.len(), 3000);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert_ne!(a, cartpole_data(3000, 5));
    }

    #[test]
    fn odd_steps_are_uniform_ks() {
        let data = cartpole_data(10_000, 7);
        let mut odd = Vec::new();
        let mut t = 0usize;
        for tr in &data {
            if t % 2 == 1 {
                odd.push(tr.a[0]);
            }
            t += 1;
            if tr.episode_ends() {
                t = 0;
            }
        }
        odd.sort_by(f64::total_cmp);
        let n = odd.len() as f64;
        let d = odd
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = (x + 1.0) / 2.0;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        let crit = 1.628 / n.sqrt();
        assert!(d < crit, "KS statistic {d} vs {crit} (n = {n})");
    }

    #[test]
    fn episodes_end_on_failure_or_horizon() {
        let data = cartpole_data(5000, 2);
        let env = CartPole::default();
        let mut len = 0;
        for w in data.windows(2) {
            len += 1;
            assert!(len <= 500);
            if w[0].episode_ends() {
                assert_eq!(w[0].terminated, env.is_failure(&w[0].s_next));
                len = 0;
            } else {
                assert_eq!(w[0].s_next, w[1].s);
            }
        }
    }
}
