//! Car on a track that is flat up to `slope_start` and then descends toward a
//! cliff at `cliff`. On the grade gravity pulls harder than the engine can
//! push, so every state there with non-negative velocity is safe but doomed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Env, EnvSpec, SimRng};

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeCarParams {
    /// Position where the downgrade begins.
    pub slope_start: f64,
    /// Failure region is `pos ≥ cliff`.
    pub cliff: f64,
    /// Engine acceleration at `|a| = 1`.
    pub u_max: f64,
    /// Gravity acceleration along the grade, directed toward the cliff.
    pub grade_accel: f64,
    pub drag: f64,
    pub dt: f64,
    pub velocity_noise: f64,
    /// Reward is highest at this position.
    pub goal: f64,
    pub init_pos: (f64, f64),
    pub init_vel: (f64, f64),
}

impl Default for SlopeCarParams {
    fn default() -> Self {
        Self {
            slope_start: 1.0,
            cliff: 2.0,
            u_max: 1.0,
            grade_accel: 1.5,
            drag: 0.1,
            dt: 0.05,
            velocity_noise: 1e-3,
            goal: 0.9,
            init_pos: (-1.0, 0.0),
            init_vel: (-0.2, 0.2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SlopeCarState {
    pub pos: f64,
    pub vel: f64,
}

impl SlopeCarState {
    pub fn new(pos: f64, vel: f64) -> Self {
        Self { pos, vel }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.pos, self.vel]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1])
    }
}

/// Acceleration from the track profile at `pos` (positive = toward the cliff).
pub fn grade_pull(p: &SlopeCarParams, pos: f64) -> f64 {
    if pos >= p.slope_start {
        p.grade_accel
    } else {
        0.0
    }
}

/// Explicit Euler step: `ṗ = v`, `v̇ = a·u_max + pull(p) − drag·v`.
pub fn slopecar_step(p: &SlopeCarParams, s: &SlopeCarState, a: f64) -> SlopeCarState {
    let acc = a.clamp(-1.0, 1.0) * p.u_max + grade_pull(p, s.pos) - p.drag * s.vel;
    SlopeCarState {
        pos: s.pos + p.dt * s.vel,
        vel: s.vel + p.dt * acc,
    }
}

pub fn slopecar_failure(p: &SlopeCarParams, s: &SlopeCarState) -> bool {
    s.pos >= p.cliff || !s.pos.is_finite() || !s.vel.is_finite()
}

/// Steps the noise-free system survives (up to `horizon`) when the engine
/// pushes away from the cliff at full power. The system is monotone in the
/// action, so this is the best any controller can do: a state is viable for
/// `horizon` steps exactly when this returns `horizon`.
pub fn steps_survived_braking(p: &SlopeCarParams, s: &SlopeCarState, horizon: usize) -> usize {
    let mut cur = *s;
    if slopecar_failure(p, &cur) {
        return 0;
    }
    for t in 0..horizon {
        cur = slopecar_step(p, &cur, -1.0);
        if slopecar_failure(p, &cur) {
            return t;
        }
    }
    horizon
}

#[derive(Clone, Debug)]
pub struct SlopeCar {
    pub params: SlopeCarParams,
    spec: EnvSpec,
}

impl SlopeCar {
    pub fn new(params: SlopeCarParams, max_episode_steps: usize) -> Self {
        Self {
            params,
            spec: EnvSpec {
                name: "slopecar".into(),
                state_dim: 2,
                action_dim: 1,
                max_episode_steps,
            },
        }
    }
}

impl Default for SlopeCar {
    fn default() -> Self {
        Self::new(SlopeCarParams::default(), 500)
    }
}

impl Env for SlopeCar {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step_mean(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        slopecar_step(&self.params, &SlopeCarState::from_slice(s), a[0]).to_vec()
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let mut next = self.step_mean(s, a);
        if self.params.velocity_noise > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            next[1] += self.params.velocity_noise * n;
        }
        next
    }

    fn is_failure(&self, s: &[f64]) -> bool {
        slopecar_failure(&self.params, &SlopeCarState::from_slice(s))
    }

    fn reward(&self, _s: &[f64], _a: &[f64], next: &[f64]) -> f64 {
        (1.0 - (next[0] - self.params.goal).abs() / 3.0).clamp(0.0, 1.0)
    }

    fn sample_initial(&self, rng: &mut SimRng) -> Vec<f64> {
        let (p0, p1) = self.params.init_pos;
        let (v0, v1) = self.params.init_vel;
        vec![rng.random_range(p0..=p1), rng.random_range(v0..=v1)]
    }

    fn linearization_point(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_ground_at_rest_stays_put() {
        let p = SlopeCarParams::default();
        let s = SlopeCarState::new(0.2, 0.0);
        assert_eq!(slopecar_step(&p, &s, 0.0), s);
    }

    #[test]
    fn full_counter_thrust_cannot_hold_the_grade() {
        let p = SlopeCarParams::default();
        assert!(p.u_max < p.grade_accel);
        let mut s = SlopeCarState::new(1.2, 0.0);
        let mut prev = s.vel;
        for _ in 0..20 {
            s = slopecar_step(&p, &s, -1.0);
            assert!(s.vel > prev, "velocity toward the cliff must keep growing");
            prev = s.vel;
        }
    }

    #[test]
    fn cliff_is_failure() {
        let p = SlopeCarParams::default();
        assert!(slopecar_failure(&p, &SlopeCarState::new(2.0, 0.0)));
        assert!(slopecar_failure(&p, &SlopeCarState::new(2.5, -1.0)));
        assert!(!slopecar_failure(&p, &SlopeCarState::new(1.99, 0.0)));
    }

    #[test]
    fn grade_is_unviable_and_flat_rest_is_viable() {
        let p = SlopeCarParams::default();
        assert!(steps_survived_braking(&p, &SlopeCarState::new(1.1, 0.0), 200) < 200);
        assert_eq!(steps_survived_braking(&p, &SlopeCarState::new(-0.5, 0.0), 200), 200);
        // fast enough backwards on the grade to climb out
        assert_eq!(steps_survived_braking(&p, &SlopeCarState::new(1.2, -2.5), 200), 200);
    }
}
