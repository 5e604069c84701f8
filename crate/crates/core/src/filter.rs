//! Hyperplane safety-filter layer.
//!
//! A filter policy emits a point `u` in the punctured unit ball. The map
//! [`hyperplane_from_u`] turns it into a halfspace `w·a ≥ b` that is
//! guaranteed to intersect the action box `[-1, 1]^n`: the direction of `u`
//! picks the normal and its norm picks how restrictive the halfspace is
//! (`‖u‖ → 0` admits everything, `‖u‖ = 1` admits a single face or vertex).
//! [`project_action`] then moves a proposed action to the nearest admissible
//! one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor applied when squashing raw actor output into the ball.
pub const U_NORM_FLOOR: f64 = 1e-6;

/// KKT tolerance the projection must reach.
pub const KKT_TOLERANCE: f64 = 1e-8;

/// A point of the hyperplane action space: `0 < ‖u‖₂ ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperplaneAction(Vec<f64>);

impl HyperplaneAction {
    /// Validates the ball constraint. A zero vector is rejected; a norm above
    /// one is pulled back onto the sphere.
    pub fn new(u: Vec<f64>) -> Result<Self> {
        let norm = l2(&u);
        if !norm.is_finite() {
            return Err(Error::Domain(format!("hyperplane action {u:?} is not finite")));
        }
        if norm == 0.0 {
            return Err(Error::Domain("hyperplane action with zero norm".into()));
        }
        if norm > 1.0 {
            if norm > 1.0 + 1e-9 {
                log::warn!("hyperplane action norm {norm} > 1, clamping onto the unit sphere");
            }
            return Ok(Self(u.iter().map(|v| v / norm).collect()));
        }
        Ok(Self(u))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Halfspace `{a : w·a ≥ b}` with unit normal.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Hyperplane {
    /// Checks `‖w‖₂ = 1` and that the halfspace meets the action box.
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        let n2 = l2(&w);
        if (n2 - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("hyperplane normal has norm {n2}, expected 1")));
        }
        let max = max_offset(&w);
        if b.abs() > max + 1e-12 {
            return Err(Error::Domain(format!(
                "offset |{b}| exceeds ‖w‖₁ = {max}; halfspace misses the action box"
            )));
        }
        Ok(Self { w, b })
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        dot(&self.w, a) >= self.b
    }

    /// The admissible action interval of a one-dimensional filter.
    pub fn interval_1d(&self) -> Result<(f64, f64)> {
        if self.w.len() != 1 {
            return Err(Error::Unsupported(format!(
                "admissible interval needs a 1-D action, got {}",
                self.w.len()
            )));
        }
        let w = self.w[0];
        if w > 0.0 {
            Ok(((self.b / w).clamp(-1.0, 1.0), 1.0))
        } else {
            Ok((-1.0, (self.b / w).clamp(-1.0, 1.0)))
        }
    }
}

/// `w = u/‖u‖₂`, `b = (2‖u‖₂ − 1)·‖w‖₁`.
pub fn hyperplane_from_u(u: &HyperplaneAction) -> Hyperplane {
    let norm = u.norm();
    let w: Vec<f64> = u.0.iter().map(|v| v / norm).collect();
    let b = (2.0 * norm - 1.0) * max_offset(&w);
    Hyperplane { w, b }
}

/// Inverse of [`hyperplane_from_u`]: `l = ½(b/‖w‖₁ + 1)`, `u = l·w`.
pub fn u_from_hyperplane(h: &Hyperplane) -> Result<HyperplaneAction> {
    let l1 = max_offset(&h.w);
    if h.b.abs() > l1 + 1e-12 {
        return Err(Error::Domain(format!(
            "offset |{}| exceeds ‖w‖₁ = {l1}; no matching hyperplane action",
            h.b
        )));
    }
    if l1 == 0.0 {
        return Err(Error::Domain("hyperplane normal is zero".into()));
    }
    let l = 0.5 * (h.b / l1 + 1.0);
    if l <= 0.0 {
        return Err(Error::Domain(
            "offset b = -‖w‖₁ maps to the excluded origin of the action ball".into(),
        ));
    }
    HyperplaneAction::new(h.w.iter().map(|v| v * l).collect())
}

/// Largest offset at which `w·a = b` still touches the box: `‖w‖₁`.
pub fn max_offset(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

/// Interpret an unconstrained `(w̃, b̃)` vector as a halfspace. Used only by
/// the raw-parametrization ablation: the normal is normalized and an offset
/// that misses the box is pulled back to the furthest touching vertex.
pub fn hyperplane_from_raw(raw: &[f64]) -> Hyperplane {
    let n = raw.len() - 1;
    let (w_raw, b_raw) = (&raw[..n], raw[n]);
    let norm = l2(w_raw);
    if norm < 1e-12 {
        // Degenerate normal: the constraint 0 ≥ b̃ either admits everything or
        // nothing; pick the least restrictive axis-aligned halfspace.
        let mut w = vec![0.0; n];
        w[0] = 1.0;
        let b = if b_raw <= 0.0 { -1.0 } else { 1.0 };
        return Hyperplane { w, b };
    }
    let w: Vec<f64> = w_raw.iter().map(|v| v / norm).collect();
    let l1 = max_offset(&w);
    let b = (b_raw / norm).clamp(-l1, l1);
    Hyperplane { w, b }
}

/// Restrictiveness `l = ½(b/‖w‖₁ + 1)` of the halfspace decoded by
/// [`hyperplane_from_raw`], with its gradient with respect to the raw vector.
/// `l` plays the role of `‖u‖` when the raw parametrization is regularized.
pub fn raw_restrictiveness(raw: &[f64]) -> (f64, Vec<f64>) {
    let n = raw.len() - 1;
    let (w_raw, b_raw) = (&raw[..n], raw[n]);
    let r = l2(w_raw);
    let h = hyperplane_from_raw(raw);
    let l1 = max_offset(&h.w);
    let l = 0.5 * (h.b / l1 + 1.0);
    let mut grad = vec![0.0; n + 1];
    if r < 1e-12 || (b_raw / r).abs() >= l1 {
        return (l, grad);
    }
    let beta = b_raw / r;
    for j in 0..n {
        let d_beta = -b_raw * w_raw[j] / (r * r * r);
        let d_l1 = (w_raw[j].signum() - l1 * w_raw[j] / r) / r;
        grad[j] = 0.5 * (d_beta / l1 - beta * d_l1 / (l1 * l1));
    }
    grad[n] = 0.5 / (r * l1);
    (l, grad)
}

/// Result of a projection with its optimality certificate.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub action: Vec<f64>,
    /// Multiplier of the halfspace constraint.
    pub multiplier: f64,
    pub kkt_residual: f64,
}

/// Nearest point to `a_pi` in `{a ∈ [-1,1]^n : w·a ≥ b}`.
pub fn project_action(a_pi: &[f64], h: &Hyperplane) -> Result<Vec<f64>> {
    project_action_detailed(a_pi, h).map(|p| p.action)
}

/// Solves `min ‖a − a_pi‖²  s.t.  w·a ≥ b, a ∈ [-1,1]^n` exactly.
///
/// For a multiplier `λ ≥ 0` the box-constrained minimizer of the Lagrangian
/// is `clip(a_pi + λw)`, and `g(λ) = w·clip(a_pi + λw)` is piecewise linear
/// and nondecreasing. The optimum is `λ = 0` when `g(0) ≥ b`; otherwise it is
/// the root of `g(λ) = b`, found by walking the at most `n` breakpoints.
pub fn project_action_detailed(a_pi: &[f64], h: &Hyperplane) -> Result<Projection> {
    if a_pi.len() != h.w.len() {
        return Err(Error::Shape {
            context: "projected action",
            expected: h.w.len(),
            got: a_pi.len(),
        });
    }
    let clipped = |lambda: f64| -> Vec<f64> {
        a_pi.iter()
            .zip(&h.w)
            .map(|(a, w)| (a + lambda * w).clamp(-1.0, 1.0))
            .collect()
    };
    let g = |lambda: f64| dot(&h.w, &clipped(lambda));

    let mut lambda = 0.0;
    if g(0.0) < h.b {
        let mut breaks: Vec<f64> = Vec::with_capacity(2 * a_pi.len());
        for (a, w) in a_pi.iter().zip(&h.w) {
            if *w == 0.0 {
                continue;
            }
            for bound in [-1.0, 1.0] {
                let t = (bound - a) / w;
                if t > 0.0 {
                    breaks.push(t);
                }
            }
        }
        breaks.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut lo, mut g_lo) = (0.0, g(0.0));
        let mut found = false;
        for &t in &breaks {
            let g_t = g(t);
            if g_t >= h.b {
                // g is affine on [lo, t]
                lambda = if g_t > g_lo {
                    lo + (h.b - g_lo) * (t - lo) / (g_t - g_lo)
                } else {
                    t
                };
                found = true;
                break;
            }
            lo = t;
            g_lo = g_t;
        }
        if !found {
            // b sits at ‖w‖₁ up to rounding; the last breakpoint is the vertex.
            lambda = breaks.last().copied().unwrap_or(0.0);
        }
    }
    let action = clipped(lambda);
    let residual = kkt_residual(a_pi, h, &action, lambda);
    // rounding can leave w·a a hair below b; tolerate at the KKT level only
    if residual > KKT_TOLERANCE {
        return Err(Error::Solver(format!(
            "KKT residual {residual:e} > {KKT_TOLERANCE:e}\ninstance:\n  a_pi = {a_pi:?}\n  w = {:?}\n  b = {}\n  lambda = {lambda}\n  a = {action:?}",
            h.w, h.b
        )));
    }
    Ok(Projection {
        action,
        multiplier: lambda,
        kkt_residual: residual,
    })
}

/// Largest violation of primal feasibility, dual feasibility, stationarity
/// (with implicit box multipliers) and complementarity.
pub fn kkt_residual(a_pi: &[f64], h: &Hyperplane, a: &[f64], lambda: f64) -> f64 {
    let slack = dot(&h.w, a) - h.b;
    let mut r = (-slack).max(0.0).max(-lambda).max((lambda * slack).abs());
    for ((ai, pi), wi) in a.iter().zip(a_pi).zip(&h.w) {
        r = r.max(ai.abs() - 1.0);
        let s = ai - pi - lambda * wi;
        let v = if *ai >= 1.0 {
            s.max(0.0)
        } else if *ai <= -1.0 {
            (-s).max(0.0)
        } else {
            s.abs()
        };
        r = r.max(v);
    }
    r
}

/// Discount of the filter problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterRewardSpec {
    pub gamma_sf: f64,
}

impl FilterRewardSpec {
    pub fn new(gamma_sf: f64) -> Result<Self> {
        if !(gamma_sf > 0.0 && gamma_sf < 1.0) {
            return Err(Error::Config(format!("filter discount {gamma_sf} not in (0, 1)")));
        }
        Ok(Self { gamma_sf })
    }

    /// Bound on the magnitude of any filter return, `1/(1 − γ)`.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.gamma_sf)
    }
}

/// `+1` while the next state stays certain and safe, `−1/(1−γ)` otherwise.
pub fn filter_reward(next_in_certain_safe: bool, spec: &FilterRewardSpec) -> f64 {
    if next_in_certain_safe {
        1.0
    } else {
        -spec.value_bound()
    }
}

/// Expected steps until the certain safe set is left, recovered from a filter
/// value: `log_γ((1 − q(1−γ))/2)`. Values outside the attainable interval are
/// clamped; the upper end maps to `+∞`.
pub fn expected_time_to_failure(q: f64, gamma_sf: f64) -> f64 {
    let bound = 1.0 / (1.0 - gamma_sf);
    if q >= bound {
        return f64::INFINITY;
    }
    let q = q.max(-bound);
    let arg = (1.0 - q * (1.0 - gamma_sf)) / 2.0;
    if arg <= 0.0 {
        return f64::INFINITY;
    }
    (arg.ln() / gamma_sf.ln()).max(0.0)
}

/// Squash a raw actor output into the punctured unit ball:
/// `u = v·min(1, 1/‖v‖)·(1 − ε)` with the norm floored at `ε`.
pub fn squash_to_ball(v: &[f64]) -> Vec<f64> {
    let norm = l2(v);
    if norm < U_NORM_FLOOR {
        if norm > 0.0 {
            return v.iter().map(|x| x / norm * U_NORM_FLOOR).collect();
        }
        let mut u = vec![0.0; v.len()];
        u[0] = U_NORM_FLOOR;
        return u;
    }
    let scale = (1.0 / norm).min(1.0) * (1.0 - U_NORM_FLOOR);
    let u: Vec<f64> = v.iter().map(|x| x * scale).collect();
    if l2(&u) < U_NORM_FLOOR {
        return v.iter().map(|x| x / norm * U_NORM_FLOOR).collect();
    }
    u
}

/// Vector-Jacobian product of [`squash_to_ball`]: maps ∂L/∂u to ∂L/∂v.
pub fn squash_backward(v: &[f64], grad_u: &[f64]) -> Vec<f64> {
    let norm = l2(v);
    let k = 1.0 - U_NORM_FLOOR;
    if norm <= 1.0 {
        if norm * k < U_NORM_FLOOR {
            // on the floor the output does not depend on the norm
            return vec![0.0; v.len()];
        }
        return grad_u.iter().map(|g| g * k).collect();
    }
    // u = k·v/‖v‖  ⇒  J = k(I − v̂v̂ᵀ)/‖v‖
    let proj = dot(v, grad_u) / (norm * norm);
    v.iter()
        .zip(grad_u)
        .map(|(vi, gi)| k * (gi - proj * vi) / norm)
        .collect()
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hp(u: &[f64]) -> Hyperplane {
        hyperplane_from_u(&HyperplaneAction::new(u.to_vec()).unwrap())
    }

    #[test]
    fn midpoint_norm_gives_zero_offset() {
        let h = hp(&[0.5]);
        assert_eq!(h.w, vec![1.0]);
        assert_eq!(h.b, 0.0);
    }

    #[test]
    fn unit_norm_selects_a_face() {
        let h = hp(&[1.0, 0.0]);
        assert_eq!(h.w, vec![1.0, 0.0]);
        assert_eq!(h.b, 1.0);
    }

    #[test]
    fn off_axis_example() {
        let h = hp(&[0.3, 0.4]);
        assert!((h.w[0] - 0.6).abs() < 1e-15 && (h.w[1] - 0.8).abs() < 1e-15);
        assert!((max_offset(&h.w) - 1.4).abs() < 1e-15);
        assert!(h.b.abs() < 1e-15);
    }

    #[test]
    fn zero_u_is_a_domain_error() {
        assert!(matches!(
            HyperplaneAction::new(vec![0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn oversized_u_is_clamped() {
        let u = HyperplaneAction::new(vec![3.0, 4.0]).unwrap();
        assert!((u.norm() - 1.0).abs() < 1e-15);
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        let u = u_from_hyperplane(&Hyperplane::new(vec![1.0], 0.0).unwrap()).unwrap();
        assert_eq!(u.as_slice(), &[0.5]);
        let u = u_from_hyperplane(&Hyperplane::new(vec![0.6, 0.8], 1.4).unwrap()).unwrap();
        assert!((u.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((u.as_slice()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn offset_beyond_l1_rejected() {
        let h = Hyperplane {
            w: vec![0.6, 0.8],
            b: 1.5,
        };
        assert!(matches!(u_from_hyperplane(&h), Err(Error::Domain(_))));
        assert!(Hyperplane::new(vec![0.6, 0.8], 1.5).is_err());
    }

    #[test]
    fn max_offset_examples() {
        assert_eq!(max_offset(&[1.0]), 1.0);
        assert_eq!(max_offset(&[0.0, 0.0]), 0.0);
        // vertex enumeration for [0.6, 0.8]
        let best = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]
            .iter()
            .map(|v| dot(&[0.6, 0.8], v))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((max_offset(&[0.6, 0.8]) - best).abs() < 1e-15);
        assert!((best - 1.4).abs() < 1e-15);
    }

    #[test]
    fn feasible_proposal_is_unchanged() {
        let h = hp(&[0.3, 0.4]);
        let a = vec![0.5, 0.2];
        assert_eq!(project_action(&a, &h).unwrap(), a);
    }

    #[test]
    fn halfline_clamp() {
        let h = Hyperplane::new(vec![1.0], 0.0).unwrap();
        let a = project_action(&[-0.7], &h).unwrap();
        assert!(a[0].abs() < 1e-15);
    }

    #[test]
    fn projection_reaches_the_vertex_at_full_restriction() {
        let h = hp(&[0.6, 0.8]); // ‖u‖ = 1 → b = ‖w‖₁, only (1, 1) admissible
        let a = project_action(&[-1.0, -1.0], &h).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9 && (a[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_shape_mismatch() {
        let h = hp(&[0.5]);
        assert!(project_action(&[0.1, 0.2], &h).is_err());
    }

    #[test]
    fn filter_reward_values() {
        let spec = FilterRewardSpec::new(0.99).unwrap();
        assert_eq!(filter_reward(true, &spec), 1.0);
        assert!((filter_reward(false, &spec) + 100.0).abs() < 1e-9);
        let spec = FilterRewardSpec::new(0.5).unwrap();
        assert_eq!(filter_reward(false, &spec), -2.0);
        assert!(FilterRewardSpec::new(1.0).is_err());
    }

    #[test]
    fn time_to_failure_endpoints() {
        let g = 0.99;
        assert_eq!(expected_time_to_failure(-1.0 / (1.0 - g), g), 0.0);
        assert_eq!(expected_time_to_failure(1.0 / (1.0 - g), g), f64::INFINITY);
    }

    #[test]
    fn time_to_failure_ten_step_chain() {
        let g: f64 = 0.99;
        let ret = (1.0 - 2.0 * g.powi(10)) / (1.0 - g);
        assert!((ret - (-80.8764)).abs() < 1e-4);
        assert!((expected_time_to_failure(ret, g) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn time_to_failure_is_strictly_increasing() {
        let g = 0.95;
        let b = 1.0 / (1.0 - g);
        let mut prev = expected_time_to_failure(-b + 1e-6, g);
        for i in 1..1000 {
            let q = -b + 2.0 * b * i as f64 / 1000.0;
            let t = expected_time_to_failure(q, g);
            assert!(t > prev, "not increasing at q = {q}");
            prev = t;
        }
    }

    #[test]
    fn interval_examples() {
        // least restrictive: b = -‖w‖₁
        let h = Hyperplane::new(vec![1.0], -1.0).unwrap();
        assert_eq!(h.interval_1d().unwrap(), (-1.0, 1.0));
        let h = Hyperplane::new(vec![1.0], 0.0).unwrap();
        assert_eq!(h.interval_1d().unwrap(), (0.0, 1.0));
        let h = Hyperplane::new(vec![-1.0], 0.5).unwrap();
        assert_eq!(h.interval_1d().unwrap(), (-1.0, -0.5));
    }

    #[test]
    fn raw_parametrization_always_meets_the_box() {
        let h = hyperplane_from_raw(&[0.0, 5.0, 100.0]);
        assert!(h.b <= max_offset(&h.w) + 1e-12);
        let h = hyperplane_from_raw(&[0.0, 0.0, -3.0]);
        assert!(project_action(&[0.2, 0.3], &h).is_ok());
    }

    #[test]
    fn squash_backward_matches_finite_differences() {
        for v in [vec![0.3, -0.2], vec![1.5, 2.0], vec![-0.9]] {
            let g = vec![0.7; v.len()];
            let analytic = squash_backward(&v, &g[..]);
            for i in 0..v.len() {
                let h = 1e-6;
                let mut vp = v.clone();
                vp[i] += h;
                let mut vm = v.clone();
                vm[i] -= h;
                let fp = dot(&squash_to_ball(&vp), &g);
                let fm = dot(&squash_to_ball(&vm), &g);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-6, "{v:?} dim {i}");
            }
        }
    }

    #[test]
    fn raw_restrictiveness_gradient_matches_finite_differences() {
        for raw in [vec![0.3, -0.7, 0.2], vec![1.5, 0.4, -0.9, 0.1], vec![-0.8, 0.05]] {
            let (l, g) = raw_restrictiveness(&raw);
            assert!((0.0..=1.0).contains(&l));
            for j in 0..raw.len() {
                let h = 1e-6;
                let mut p = raw.clone();
                let mut m = raw.clone();
                p[j] += h;
                m[j] -= h;
                let fd = (raw_restrictiveness(&p).0 - raw_restrictiveness(&m).0) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6, "component {j}: {fd} vs {}", g[j]);
            }
        }
        // clamped offsets have no gradient
        let (l, g) = raw_restrictiveness(&[1.0, 5.0]);
        assert_eq!(l, 1.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn squashed_output_lies_in_the_action_ball(v in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let u = squash_to_ball(&v);
            let n = l2(&u);
            prop_assert!(n > 0.0 && n <= 1.0);
        }

        #[test]
        fn bijection_round_trip(
            dir in prop::collection::vec(-1.0f64..1.0, 1..7),
            radius in 1e-3f64..1.0,
        ) {
            let norm = l2(&dir);
            prop_assume!(norm > 1e-3);
            let u: Vec<f64> = dir.iter().map(|d| d / norm * radius).collect();
            let h = hp(&u);
            prop_assert!(h.b.abs() <= max_offset(&h.w) + 1e-12);
            let back = u_from_hyperplane(&h).unwrap();
            for (x, y) in back.as_slice().iter().zip(&u) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn projection_satisfies_kkt(
            dir in prop::collection::vec(-1.0f64..1.0, 1..5),
            radius in 1e-3f64..1.0,
            a in prop::collection::vec(-1.5f64..1.5, 5),
        ) {
            let norm = l2(&dir);
            prop_assume!(norm > 1e-3);
            let u: Vec<f64> = dir.iter().map(|d| d / norm * radius).collect();
            let h = hp(&u);
            let a = &a[..u.len()];
            let p = project_action_detailed(a, &h).unwrap();
            prop_assert!(p.kkt_residual <= KKT_TOLERANCE);
            prop_assert!(dot(&h.w, &p.action) >= h.b - 1e-9);
        }
    }
}
