//! Discrete-time LQR by fixed-point iteration of the Riccati recursion.

use ndarray::{Array1, Array2};

use super::{CartPole, Env, EnvId};
use crate::error::{Error, Result};

const RICCATI_TOL: f64 = 1e-10;
const RICCATI_MAX_ITERS: usize = 100_000;

/// State-feedback gain `K` with `a = -K s` for `s' = A s + B a`.
pub fn lqr_gain(a: &Array2<f64>, b: &Array2<f64>, q: &Array2<f64>, r: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.dim() != (n, n) || r.dim() != (m, m) {
        return Err(Error::Config(format!(
            "lqr dimensions: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.dim(),
            b.dim(),
            q.dim(),
            r.dim()
        )));
    }
    let at = a.t();
    let bt = b.t();
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITERS {
        let btp = bt.dot(&p);
        let s = r + &btp.dot(b);
        let k = solve(&s, &btp.dot(a))?;
        let next = q + &at.dot(&p).dot(a) - &at.dot(&p).dot(b).dot(&k);
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let diff = (&next - &p).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let scale = next.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        p = next;
        if diff <= RICCATI_TOL * scale {
            let btp = bt.dot(&p);
            return solve(&(r + &btp.dot(b)), &btp.dot(a));
        }
    }
    Err(Error::Solver(
        "Riccati iteration diverged or did not converge; is (A, B) stabilizable?".into(),
    ))
}

/// Solves `S X = Y` for small square `S` by Gaussian elimination with partial
/// pivoting.
fn solve(s: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    let m = s.nrows();
    let mut a = s.clone();
    let mut x = y.clone();
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap_or(col);
        if a[[piv, col]].abs() < 1e-300 {
            return Err(Error::Solver("singular matrix in LQR solve".into()));
        }
        if piv != col {
            for j in 0..m {
                a.swap([piv, j], [col, j]);
            }
            for j in 0..x.ncols() {
                x.swap([piv, j], [col, j]);
            }
        }
        for i in 0..m {
            if i == col {
                continue;
            }
            let f = a[[i, col]] / a[[col, col]];
            if f == 0.0 {
                continue;
            }
            for j in 0..m {
                a[[i, j]] -= f * a[[col, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[col, j]];
            }
        }
    }
    for i in 0..m {
        let d = a[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    Ok(x)
}

/// Central-difference Jacobians `(A, B)` of the noise-free step at `(s0, a0)`.
pub fn linearize(env: &dyn Env, s0: &[f64], a0: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let n = s0.len();
    let m = a0.len();
    let h = 1e-6;
    let mut a = Array2::zeros((n, n));
    let mut b = Array2::zeros((n, m));
    for j in 0..n {
        let mut sp = s0.to_vec();
        let mut sm = s0.to_vec();
        sp[j] += h;
        sm[j] -= h;
        let fp = env.step_mean(&sp, a0);
        let fm = env.step_mean(&sm, a0);
        for i in 0..n {
            a[[i, j]] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for j in 0..m {
        let mut ap = a0.to_vec();
        let mut am = a0.to_vec();
        ap[j] += h;
        am[j] -= h;
        let fp = env.step_mean(s0, &ap);
        let fm = env.step_mean(s0, &am);
        for i in 0..n {
            b[[i, j]] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (a, b)
}

/// Spectral radius via Gelfand's formula `ρ(M) = lim ‖M^k‖^{1/k}`, using
/// repeated squaring with renormalization (k = 2^40).
pub fn spectral_radius(m: &Array2<f64>) -> f64 {
    let mut cur = m.clone();
    let mut log_scale = 0.0f64;
    let mut k = 1.0f64;
    for _ in 0..40 {
        let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        // cur = M^k / exp(log_scale)
        cur.mapv_inplace(|v| v / norm);
        log_scale += norm.ln();
        cur = cur.dot(&cur);
        log_scale *= 2.0;
        k *= 2.0;
    }
    let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    ((log_scale + norm.ln()) / k).exp()
}

/// `a = clip(-K (s - s_eq))`.
#[derive(Clone, Debug)]
pub struct LinearFeedback {
    pub gain: Array2<f64>,
    pub equilibrium: Array1<f64>,
}

impl LinearFeedback {
    pub fn act(&self, s: &[f64]) -> Vec<f64> {
        let ds = Array1::from_iter(s.iter().zip(&self.equilibrium).map(|(x, e)| x - e));
        self.gain.dot(&ds).iter().map(|v| (-v).clamp(-1.0, 1.0)).collect()
    }
}

/// LQR state feedback around `env.linearization_point()` with diagonal
/// weights.
pub fn lqr_controller(env: &dyn Env, q_diag: &[f64], r: f64) -> Result<LinearFeedback> {
    let s0 = env.linearization_point();
    let m = env.spec().action_dim;
    let (a, b) = linearize(env, &s0, &vec![0.0; m]);
    let q = Array2::from_diag(&Array1::from(q_diag.to_vec()));
    let r = Array2::eye(m) * r;
    let gain = lqr_gain(&a, &b, &q, &r)?;
    Ok(LinearFeedback {
        gain,
        equilibrium: Array1::from(s0),
    })
}

/// LQR stabilizer for the upright CartPole equilibrium.
pub fn cartpole_lqr_gain(env: &CartPole) -> Result<LinearFeedback> {
    lqr_controller(env, &[1.0, 1.0, 10.0, 1.0], 0.1)
}

/// Nominal prior-data controller for each built-in environment.
pub fn default_prior_controller(id: EnvId, env: &dyn Env) -> Result<LinearFeedback> {
    match id {
        EnvId::CartPole => lqr_controller(env, &[1.0, 1.0, 10.0, 1.0], 0.1),
        EnvId::SlopeCar => lqr_controller(env, &[1.0, 0.1], 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{cartpole_step, CartPoleParams, CartPoleState};
    use ndarray::array;

    #[test]
    fn scalar_riccati_fixed_point_is_golden_ratio() {
        let one = array![[1.0]];
        let k = lqr_gain(&one, &one, &one, &one).unwrap();
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((k[[0, 0]] - p / (1.0 + p)).abs() < 1e-9);
        assert!((k[[0, 0]] - 0.618034).abs() < 1e-6);
    }

    #[test]
    fn no_control_authority_gives_zero_gain() {
        let a = array![[0.5, 0.1], [0.0, 0.3]];
        let b = array![[0.0], [0.0]];
        let k = lqr_gain(&a, &b, &Array2::eye(2), &array![[1.0]]).unwrap();
        assert!(k.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unstabilizable_system_is_an_error() {
        let a = array![[1.5]];
        let b = array![[0.0]];
        assert!(lqr_gain(&a, &b, &array![[1.0]], &array![[1.0]]).is_err());
    }

    #[test]
    fn spectral_radius_of_known_matrices() {
        assert!((spectral_radius(&array![[0.5, 0.0], [0.0, -0.9]]) - 0.9).abs() < 1e-6);
        // rotation scaled by 0.8
        let c = 0.8 * 0.3f64.cos();
        let s = 0.8 * 0.3f64.sin();
        assert!((spectral_radius(&array![[c, -s], [s, c]]) - 0.8).abs() < 1e-6);
        // Jordan block: non-normal, radius is still the eigenvalue
        assert!((spectral_radius(&array![[0.7, 5.0], [0.0, 0.7]]) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn cartpole_closed_loop_is_stable() {
        let env = CartPole::default();
        let (a, b) = linearize(&env, &[0.0; 4], &[0.0]);
        assert!(spectral_radius(&a) > 1.0, "upright equilibrium should be unstable open loop");
        let fb = cartpole_lqr_gain(&env).unwrap();
        let closed = &a - &b.dot(&fb.gain);
        assert!(spectral_radius(&closed) < 1.0);

        let p = CartPoleParams::default();
        let mut s = CartPoleState::new(0.1, 0.0, 0.05, 0.0);
        for _ in 0..1000 {
            s = cartpole_step(&p, &s, fb.act(&s.to_vec())[0]);
        }
        assert!(s.to_vec().iter().all(|v| v.abs() < 1e-3), "{s:?}");
    }

    #[test]
    fn slopecar_controller_returns_to_rest_on_flat_ground() {
        use crate::env::{slopecar_step, SlopeCar, SlopeCarParams, SlopeCarState};
        let env = SlopeCar::default();
        let fb = default_prior_controller(EnvId::SlopeCar, &env).unwrap();
        let p = SlopeCarParams::default();
        let mut s = SlopeCarState::new(-0.8, 0.3);
        for _ in 0..2000 {
            s = slopecar_step(&p, &s, fb.act(&s.to_vec())[0]);
        }
        assert!(s.pos.abs() < 1e-3 && s.vel.abs() < 1e-3, "{s:?}");
    }
}
