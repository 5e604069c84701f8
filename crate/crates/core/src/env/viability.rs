//! Finite-horizon viability kernel of the noise-free slope car.
//!
//! Two independent routes: a grid dynamic program (backward induction over a
//! discretized action set with nearest-cell snapping) and an exact
//! trajectory check that exploits monotonicity of the dynamics.

use serde::{Deserialize, Serialize};

use super::{slopecar_failure, slopecar_step, steps_survived_braking, SlopeCarParams, SlopeCarState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViabilityGridSpec {
    pub pos_range: (f64, f64),
    pub vel_range: (f64, f64),
    pub pos_cells: usize,
    pub vel_cells: usize,
    pub actions: usize,
    pub horizon: usize,
}

impl Default for ViabilityGridSpec {
    fn default() -> Self {
        Self {
            pos_range: (-1.0, 2.2),
            vel_range: (-3.0, 3.0),
            pos_cells: 161,
            vel_cells: 241,
            actions: 11,
            horizon: 200,
        }
    }
}

impl ViabilityGridSpec {
    pub fn pos_step(&self) -> f64 {
        (self.pos_range.1 - self.pos_range.0) / (self.pos_cells - 1) as f64
    }

    pub fn vel_step(&self) -> f64 {
        (self.vel_range.1 - self.vel_range.0) / (self.vel_cells - 1) as f64
    }

    pub fn pos_at(&self, i: usize) -> f64 {
        self.pos_range.0 + i as f64 * self.pos_step()
    }

    pub fn vel_at(&self, j: usize) -> f64 {
        self.vel_range.0 + j as f64 * self.vel_step()
    }

    fn snap(&self, s: &SlopeCarState) -> (usize, usize) {
        let i = ((s.pos - self.pos_range.0) / self.pos_step()).round();
        let j = ((s.vel - self.vel_range.0) / self.vel_step()).round();
        (
            i.clamp(0.0, (self.pos_cells - 1) as f64) as usize,
            j.clamp(0.0, (self.vel_cells - 1) as f64) as usize,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ViabilityGrid {
    pub spec: ViabilityGridSpec,
    /// Row-major `[pos][vel]`.
    pub viable: Vec<bool>,
    pub warnings: Vec<String>,
}

impl ViabilityGrid {
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.viable[i * self.spec.vel_cells + j]
    }

    /// Nearest-cell lookup.
    pub fn contains(&self, s: &SlopeCarState) -> bool {
        let (i, j) = self.spec.snap(s);
        self.at(i, j)
    }

    /// Largest viable position per velocity row (`None` if the row is empty).
    pub fn boundary(&self) -> Vec<Option<f64>> {
        (0..self.spec.vel_cells)
            .map(|j| {
                (0..self.spec.pos_cells)
                    .rev()
                    .find(|&i| self.at(i, j))
                    .map(|i| self.spec.pos_at(i))
            })
            .collect()
    }

    pub fn viable_fraction(&self) -> f64 {
        self.viable.iter().filter(|&&v| v).count() as f64 / self.viable.len() as f64
    }
}

/// Backward induction: a cell is viable for `k+1` steps iff it is safe and
/// some discretized action leads (after snapping) to a cell viable for `k`.
pub fn viability_oracle(p: &SlopeCarParams, spec: &ViabilityGridSpec) -> Result<ViabilityGrid> {
    if spec.pos_cells < 2 || spec.vel_cells < 2 || spec.actions < 2 {
        return Err(Error::Config("viability grid needs at least 2 cells per axis and 2 actions".into()));
    }
    let mut warnings = Vec::new();
    let dv_grade = p.dt * (p.grade_accel - p.u_max).abs();
    if dv_grade < 0.5 * spec.vel_step() {
        warnings.push(format!(
            "velocity cell {:.4} too coarse: net grade acceleration changes velocity by {:.4} per step, \
             snapping will hold cars at rest on the slope",
            spec.vel_step(),
            dv_grade
        ));
    }
    if p.dt * spec.vel_step() > spec.pos_step() {
        warnings.push("position cells finer than one velocity cell of travel per step".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let (np, nv) = (spec.pos_cells, spec.vel_cells);
    let actions: Vec<f64> = (0..spec.actions)
        .map(|k| -1.0 + 2.0 * k as f64 / (spec.actions - 1) as f64)
        .collect();
    // successor cell per (cell, action), or None if it enters the failure set
    let mut succ = vec![None; np * nv * actions.len()];
    let mut safe = vec![false; np * nv];
    for i in 0..np {
        for j in 0..nv {
            let c = i * nv + j;
            let s = SlopeCarState::new(spec.pos_at(i), spec.vel_at(j));
            safe[c] = !slopecar_failure(p, &s);
            for (k, &a) in actions.iter().enumerate() {
                let next = slopecar_step(p, &s, a);
                if !slopecar_failure(p, &next) {
                    let (ni, nj) = spec.snap(&next);
                    succ[c * actions.len() + k] = Some(ni * nv + nj);
                }
            }
        }
    }
    let mut viable = safe.clone();
    for _ in 0..spec.horizon {
        let prev = viable.clone();
        for c in 0..np * nv {
            if prev[c] {
                viable[c] = succ[c * actions.len()..(c + 1) * actions.len()]
                    .iter()
                    .any(|n| n.is_some_and(|n| prev[n]));
            }
        }
        if viable == prev {
            break;
        }
    }
    Ok(ViabilityGrid {
        spec: spec.clone(),
        viable,
        warnings,
    })
}

/// Largest position from which the car survives `horizon` steps at velocity
/// `vel`, by bisection on the exact check (viability is monotone in position).
pub fn viable_position_bound(p: &SlopeCarParams, vel: f64, horizon: usize, lo: f64) -> Option<f64> {
    let ok = |pos: f64| steps_survived_braking(p, &SlopeCarState::new(pos, vel), horizon) == horizon;
    if !ok(lo) {
        return None;
    }
    let (mut a, mut b) = (lo, p.cliff);
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if ok(m) {
            a = m;
        } else {
            b = m;
        }
    }
    Some(a)
}

/// Relative distance to the kernel boundary along the position axis:
/// `(bound(v) − pos) / (bound(v) − lo)`. Negative outside the kernel.
pub fn viability_margin(p: &SlopeCarParams, s: &SlopeCarState, horizon: usize, lo: f64) -> f64 {
    match viable_position_bound(p, s.vel, horizon, lo) {
        Some(b) if b > lo => (b - s.pos) / (b - lo),
        _ => -1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(horizon: usize) -> ViabilityGridSpec {
        ViabilityGridSpec {
            pos_cells: 81,
            vel_cells: 241,
            horizon,
            ..ViabilityGridSpec::default()
        }
    }

    #[test]
    fn failed_states_are_unviable_and_flat_rest_is_viable() {
        let p = SlopeCarParams::default();
        let g = viability_oracle(&p, &small_spec(100)).unwrap();
        assert!(g.warnings.is_empty(), "{:?}", g.warnings);
        for j in 0..g.spec.vel_cells {
            for i in 0..g.spec.pos_cells {
                if g.spec.pos_at(i) >= p.cliff {
                    assert!(!g.at(i, j));
                }
            }
        }
        assert!(g.contains(&SlopeCarState::new(-0.5, 0.0)));
        assert!(!g.contains(&SlopeCarState::new(1.5, 0.0)));
    }

    #[test]
    fn monotone_in_horizon() {
        let p = SlopeCarParams::default();
        let mut prev = viability_oracle(&p, &small_spec(0)).unwrap();
        for t in [1, 5, 20, 60] {
            let cur = viability_oracle(&p, &small_spec(t)).unwrap();
            for (a, b) in cur.viable.iter().zip(&prev.viable) {
                assert!(!a || *b, "viable(T+1) must be a subset of viable(T)");
            }
            prev = cur;
        }
    }

    #[test]
    fn coarse_grid_warns() {
        let spec = ViabilityGridSpec {
            vel_cells: 21,
            ..small_spec(10)
        };
        let g = viability_oracle(&SlopeCarParams::default(), &spec).unwrap();
        assert!(!g.warnings.is_empty());
    }

    #[test]
    fn grid_agrees_with_exact_check_away_from_boundary() {
        // Snapping errors accumulate along trajectories, so the two routes may
        // disagree only in a thin band around the exact boundary.
        let p = SlopeCarParams::default();
        let spec = ViabilityGridSpec::default();
        let g = viability_oracle(&p, &spec).unwrap();
        let mut mismatches = 0;
        for i in 0..spec.pos_cells {
            for j in 0..spec.vel_cells {
                let s = SlopeCarState::new(spec.pos_at(i), spec.vel_at(j));
                let exact = viability_margin(&p, &s, spec.horizon, spec.pos_range.0) >= 0.0;
                if g.at(i, j) == exact {
                    continue;
                }
                mismatches += 1;
                let bound = viable_position_bound(&p, s.vel, spec.horizon, spec.pos_range.0);
                let dist = bound.map_or(f64::INFINITY, |b| (b - s.pos).abs());
                assert!(dist <= 0.3, "disagreement far from the boundary at {s:?}");
            }
        }
        let frac = mismatches as f64 / g.viable.len() as f64;
        assert!(frac < 0.02, "disagreement fraction {frac}");
    }

    #[test]
    fn margin_is_one_at_lower_edge_and_zero_at_boundary() {
        let p = SlopeCarParams::default();
        let b = viable_position_bound(&p, 0.0, 200, -1.0).unwrap();
        assert!(b > p.slope_start - 0.1 && b <= p.slope_start + 1e-6, "bound {b}");
        assert!((viability_margin(&p, &SlopeCarState::new(-1.0, 0.0), 200, -1.0) - 1.0).abs() < 1e-12);
        assert!(viability_margin(&p, &SlopeCarState::new(b, 0.0), 200, -1.0).abs() < 1e-9);
        assert!(viability_margin(&p, &SlopeCarState::new(1.8, 0.0), 200, -1.0) < 0.0);
    }
}
