//! Epistemic entropy and certain-set thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the per-dimension disagreement variance.
pub const VAR_FLOOR: f64 = 1e-12;

/// `½ ln(2πe)`.
const HALF_LN_2PIE: f64 = 1.418_938_533_204_672_7;

/// Entropy of a diagonal Gaussian whose per-dimension variance is the
/// population variance of the member means. `per_dim[d]` holds the `E`
/// member means of dimension `d`.
pub fn entropy_from_means(per_dim: &[Vec<f64>]) -> f64 {
    per_dim
        .iter()
        .map(|means| {
            let n = means.len() as f64;
            let mu = means.iter().sum::<f64>() / n;
            let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n;
            HALF_LN_2PIE + 0.5 * var.max(VAR_FLOOR).ln()
        })
        .sum()
}

/// Per-step and per-trajectory entropy gates.
///
/// `lambda1` bounds the entropy of each step. Entropies are differential and
/// may be negative, so the trajectory budget is charged with the excess over
/// `lambda0`, the entropy level of exceptionally accurate predictions:
/// a rollout stays trusted while `Σ max(0, H_t − λ0) ≤ λ2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertainSetThresholds {
    pub lambda1: f64,
    pub lambda0: f64,
    pub lambda2: f64,
}

impl CertainSetThresholds {
    pub fn in_certain(&self, entropy: f64) -> bool {
        entropy <= self.lambda1
    }

    /// Budget charge of one step.
    pub fn information_loss(&self, entropy: f64) -> f64 {
        (entropy - self.lambda0).max(0.0)
    }
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value.
pub fn nearest_rank_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// `λ1` is the `ζ1` quantile of the entropies, `λ0` the `ζ2` quantile, and
/// `λ2 = horizon · median{H − λ0 : λ0 ≤ H ≤ λ1}`.
pub fn calibrate_from_entropies(
    entropies: &[f64],
    zeta1: f64,
    zeta2: f64,
    horizon: usize,
) -> Result<CertainSetThresholds> {
    if entropies.is_empty() {
        return Err(Error::Training("cannot calibrate thresholds on an empty buffer".into()));
    }
    if !(0.0 < zeta2 && zeta2 < zeta1 && zeta1 <= 1.0) {
        return Err(Error::Config(format!("need 0 < zeta2 < zeta1 <= 1, got {zeta2}, {zeta1}")));
    }
    let mut sorted: Vec<f64> = entropies.to_vec();
    if sorted.iter().any(|h| !h.is_finite()) {
        return Err(Error::Training("non-finite entropy during calibration".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let lambda1 = nearest_rank_quantile(&sorted, zeta1);
    let lambda0 = nearest_rank_quantile(&sorted, zeta2);
    let band: Vec<f64> = sorted
        .iter()
        .filter(|&&h| h >= lambda0 && h <= lambda1)
        .map(|h| h - lambda0)
        .collect();
    let median = if band.is_empty() { 0.0 } else { band[(band.len() - 1) / 2] };
    Ok(CertainSetThresholds {
        lambda1,
        lambda0,
        lambda2: horizon as f64 * median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_members_hit_the_floor() {
        let h = entropy_from_means(&[vec![0.3; 5], vec![-1.0; 5]]);
        let expected = 2.0 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 1e-12).ln();
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn two_members_at_plus_minus_one() {
        let h = entropy_from_means(&[vec![-1.0, 1.0]]);
        assert!((h - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-15);
        assert!((h - 1.4189).abs() < 1e-4);
    }

    #[test]
    fn scaling_means_adds_log_two_per_dimension() {
        let base = vec![vec![0.1, 0.5, -0.3], vec![2.0, 2.2, 1.7]];
        let scaled: Vec<Vec<f64>> = base.iter().map(|d| d.iter().map(|m| 2.0 * m).collect()).collect();
        let diff = entropy_from_means(&scaled) - entropy_from_means(&base);
        assert!((diff - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_entropies() {
        let t = calibrate_from_entropies(&[0.7; 50], 0.99, 0.01, 100).unwrap();
        assert_eq!(t.lambda1, 0.7);
        assert_eq!(t.lambda0, 0.7);
        assert_eq!(t.lambda2, 0.0);
    }

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let h: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let t = calibrate_from_entropies(&h, 0.99, 0.01, 10).unwrap();
        assert_eq!(t.lambda1, 99.0);
        assert_eq!(t.lambda0, 1.0);
        // band 1..=99 shifted by 1: median of 0..=98 is 49
        assert_eq!(t.lambda2, 490.0);
    }

    #[test]
    fn calibration_recount() {
        let h: Vec<f64> = (0..1234).map(|i| ((i * 7919) % 1234) as f64 * 0.01 - 3.0).collect();
        let t = calibrate_from_entropies(&h, 0.99, 0.01, 500).unwrap();
        let frac = h.iter().filter(|&&x| t.in_certain(x)).count() as f64 / h.len() as f64;
        assert!((0.98..=1.0).contains(&frac));
        assert!(t.lambda2 >= 0.0);
    }

    #[test]
    fn bad_quantiles_are_rejected() {
        assert!(calibrate_from_entropies(&[1.0], 0.01, 0.99, 1).is_err());
        assert!(calibrate_from_entropies(&[], 0.99, 0.01, 1).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn entropy_ignores_a_common_shift(
            means in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2..7), 1..5),
            shift in -50.0f64..50.0,
        ) {
            let shifted: Vec<Vec<f64>> = means.iter().map(|d| d.iter().map(|m| m + shift).collect()).collect();
            prop_assert!((entropy_from_means(&means) - entropy_from_means(&shifted)).abs() < 1e-6);
        }

        #[test]
        fn calibration_keeps_the_requested_share(
            h in prop::collection::vec(-20.0f64..20.0, 1..400),
            zeta1 in 0.5f64..1.0,
            zeta2 in 0.001f64..0.4,
            horizon in 1usize..300,
        ) {
            let t = calibrate_from_entropies(&h, zeta1, zeta2, horizon).unwrap();
            let inside = h.iter().filter(|&&x| t.in_certain(x)).count() as f64;
            prop_assert!(inside >= zeta1 * h.len() as f64 - 1e-9);
            prop_assert!(t.lambda0 <= t.lambda1);
            prop_assert!(t.lambda2 >= 0.0);
        }

        #[test]
        fn budget_charge_is_monotone_and_non_negative(a in -30.0f64..30.0, b in -30.0f64..30.0, l0 in -5.0f64..5.0) {
            let t = CertainSetThresholds { lambda1: 0.0, lambda0: l0, lambda2: 1.0 };
            prop_assert!(t.information_loss(a) >= 0.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.information_loss(lo) <= t.information_loss(hi));
        }
    }
}
