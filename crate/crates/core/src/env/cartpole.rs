//! Goal-reaching cart-pole with position and angle constraints.
//!
//! Classic cart-pole equations with a continuous force `F = a·F_max`,
//! integrated with semi-implicit Euler (velocities first, then positions).

use rand_distr::{Distribution, StandardNormal};

use super::{Env, EnvSpec, SimRng};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from the pivot to the pole's center of mass.
    pub half_length: f64,
    pub force_max: f64,
    pub dt: f64,
    pub theta_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_goal: f64,
    /// Std of the additive Gaussian noise on both velocities.
    pub velocity_noise: f64,
    /// Initial states are uniform in `[-init_range, init_range]^4`.
    pub init_range: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_max: 10.0,
            dt: 0.02,
            theta_max: 0.21,
            x_min: -2.4,
            x_max: 2.4,
            x_goal: 1.5,
            velocity_noise: 1e-3,
            init_range: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self {
            x,
            x_dot,
            theta,
            theta_dot,
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }
}

/// Cart and pole accelerations `(ẍ, θ̈)` under force `force`.
pub fn accelerations(p: &CartPoleParams, s: &CartPoleState, force: f64) -> (f64, f64) {
    let total = p.cart_mass + p.pole_mass;
    let pml = p.pole_mass * p.half_length;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc =
        (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    (x_acc, theta_acc)
}

/// Noise-free step for a scalar action in `[-1, 1]`.
pub fn cartpole_step(p: &CartPoleParams, s: &CartPoleState, a: f64) -> CartPoleState {
    let force = a.clamp(-1.0, 1.0) * p.force_max;
    let (x_acc, theta_acc) = accelerations(p, s, force);
    let x_dot = s.x_dot + p.dt * x_acc;
    let theta_dot = s.theta_dot + p.dt * theta_acc;
    CartPoleState {
        x: s.x + p.dt * x_dot,
        x_dot,
        theta: s.theta + p.dt * theta_dot,
        theta_dot,
    }
}

/// Pole beyond the angle limit or cart outside the track.
pub fn cartpole_failure(p: &CartPoleParams, s: &CartPoleState) -> bool {
    s.theta.abs() > p.theta_max || s.x < p.x_min || s.x > p.x_max || !is_finite(s)
}

fn is_finite(s: &CartPoleState) -> bool {
    s.x.is_finite() && s.x_dot.is_finite() && s.theta.is_finite() && s.theta_dot.is_finite()
}

/// `clip(1 − |x − x_goal| / 4.8, 0, 1)` evaluated at the next state.
pub fn goal_reward(p: &CartPoleParams, next: &CartPoleState) -> f64 {
    (1.0 - (next.x - p.x_goal).abs() / (p.x_max - p.x_min)).clamp(0.0, 1.0)
}

/// Total mechanical energy of the frictionless system (rod pole, pivot on
/// the cart).
pub fn mechanical_energy(p: &CartPoleParams, s: &CartPoleState) -> f64 {
    let (m, mc, l) = (p.pole_mass, p.cart_mass, p.half_length);
    let cos = s.theta.cos();
    0.5 * (mc + m) * s.x_dot * s.x_dot
        + m * l * cos * s.x_dot * s.theta_dot
        + (2.0 / 3.0) * m * l * l * s.theta_dot * s.theta_dot
        + m * p.gravity * l * cos
}

#[derive(Clone, Debug)]
pub struct CartPole {
    pub params: CartPoleParams,
    spec: EnvSpec,
}

impl CartPole {
    pub fn new(params: CartPoleParams, max_episode_steps: usize) -> Self {
        Self {
            params,
            spec: EnvSpec {
                name: "cartpole".into(),
                state_dim: 4,
                action_dim: 1,
                max_episode_steps,
            },
        }
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new(CartPoleParams::default(), 500)
    }
}

impl Env for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step_mean(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        cartpole_step(&self.params, &CartPoleState::from_slice(s), a[0]).to_vec()
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let mut next = self.step_mean(s, a);
        let sigma = self.params.velocity_noise;
        if sigma > 0.0 {
            let n1: f64 = StandardNormal.sample(rng);
            let n2: f64 = StandardNormal.sample(rng);
            next[1] += sigma * n1;
            next[3] += sigma * n2;
        }
        next
    }

    fn is_failure(&self, s: &[f64]) -> bool {
        cartpole_failure(&self.params, &CartPoleState::from_slice(s))
    }

    fn reward(&self, _s: &[f64], _a: &[f64], next: &[f64]) -> f64 {
        goal_reward(&self.params, &CartPoleState::from_slice(next))
    }

    fn sample_initial(&self, rng: &mut SimRng) -> Vec<f64> {
        let r = self.params.init_range;
        (0..4).map(|_| rng.random_range(-r..=r)).collect()
    }

    fn linearization_point(&self) -> Vec<f64> {
        vec![0.0; 4]
    }
}
