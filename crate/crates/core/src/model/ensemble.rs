//! Probabilistic ensemble over state deltas with learnable soft log-variance
//! bounds.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::entropy::{entropy_from_means, CertainSetThresholds};
use crate::approx::{adam_step, Activation, AdamConfig, MlpParams, OptimizerState, VectorAdam};
use crate::env::{SimRng, Transition};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const STD_FLOOR: f64 = 1e-6;

/// `½(ln 2π + lv + (y − μ)² e^{−lv})`.
pub fn gaussian_nll(y: f64, mean: f64, logvar: f64) -> f64 {
    0.5 * (LN_2PI + logvar + (y - mean).powi(2) * (-logvar).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Cap on gradient steps per epoch; 0 means `E` passes over the data.
    pub max_epoch_steps: usize,
    /// Fraction of the data held out for early stopping.
    pub holdout_fraction: f64,
    pub max_holdout: usize,
    /// Weight of `Σ(max_logvar − min_logvar)` in the loss.
    pub bound_regularizer: f64,
    pub init_max_logvar: f64,
    pub init_min_logvar: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 7,
            hidden: vec![200, 200, 200, 200],
            lr: 6e-4,
            weight_decay: 7e-4,
            batch_size: 256,
            patience: 10,
            max_epochs: 200,
            max_epoch_steps: 0,
            holdout_fraction: 0.1,
            max_holdout: 5000,
            bound_regularizer: 0.01,
            init_max_logvar: 0.5,
            init_min_logvar: -10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    /// Mean training NLL per epoch.
    pub train_nll: Vec<f64>,
    /// Mean held-out NLL per epoch.
    pub holdout_nll: Vec<f64>,
}

impl TrainReport {
    pub fn best_holdout_nll(&self) -> f64 {
        self.holdout_nll.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-member predictions for a batch, in state units.
#[derive(Clone, Debug)]
pub struct EnsemblePrediction {
    /// `E` arrays of next-state means, `B × n_s`.
    pub means: Vec<Array2<f64>>,
    /// `E` arrays of aleatoric variances, `B × n_s`.
    pub vars: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct ModelStepResult {
    pub s_next: Vec<f64>,
    pub entropy: f64,
    pub in_certain: bool,
    pub member: usize,
    pub member_means: Vec<Vec<f64>>,
    pub member_vars: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub members: Vec<MlpParams>,
    pub max_logvar: Vec<f64>,
    pub min_logvar: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    pub thresholds: Option<CertainSetThresholds>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl EnsembleModel {
    pub fn new(state_dim: usize, action_dim: usize, cfg: &EnsembleConfig, rng: &mut SimRng) -> Result<Self> {
        if cfg.members < 2 {
            return Err(Error::Config(format!("ensemble needs at least 2 members, got {}", cfg.members)));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(2 * state_dim);
        let members = (0..cfg.members)
            .map(|_| MlpParams::init(&sizes, Activation::Silu, Activation::Identity, rng))
            .collect();
        Ok(Self {
            state_dim,
            action_dim,
            members,
            max_logvar: vec![cfg.init_max_logvar; state_dim],
            min_logvar: vec![cfg.init_min_logvar; state_dim],
            input_mean: vec![0.0; state_dim + action_dim],
            input_std: vec![1.0; state_dim + action_dim],
            target_mean: vec![0.0; state_dim],
            target_std: vec![1.0; state_dim],
            thresholds: None,
        })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    fn normalize_inputs(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut x = concatenate(Axis(1), &[states, actions]).map_err(|e| Error::Config(e.to_string()))?;
        if x.ncols() != self.input_mean.len() {
            return Err(Error::Shape {
                context: "model input",
                expected: self.input_mean.len(),
                got: x.ncols(),
            });
        }
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.input_mean).zip(&self.input_std) {
                *v = (*v - m) / s;
            }
        }
        Ok(x)
    }

    /// Soft-bounded log-variance and its derivatives with respect to the raw
    /// head output, the upper and the lower bound.
    fn bounded_logvar(&self, raw: f64, d: usize) -> (f64, f64, f64, f64) {
        let (hi, lo) = (self.max_logvar[d], self.min_logvar[d]);
        let lv1 = hi - softplus(hi - raw);
        let lv = lo + softplus(lv1 - lo);
        let s1 = sigmoid(hi - raw);
        let s2 = sigmoid(lv1 - lo);
        (lv, s2 * s1, s2 * (1.0 - s1), 1.0 - s2)
    }

    /// Normalized-space mean and log-variance of one member.
    fn member_normalized(&self, e: usize, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.members[e].forward(x)?;
        let ns = self.state_dim;
        let mean = out.slice(s![.., ..ns]).to_owned();
        let mut lv = out.slice(s![.., ns..]).to_owned();
        for mut row in lv.rows_mut() {
            for (d, v) in row.iter_mut().enumerate() {
                *v = self.bounded_logvar(*v, d).0;
            }
        }
        Ok((mean, lv))
    }

    /// Next-state means and aleatoric variances of every member.
    pub fn predict(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<EnsemblePrediction> {
        let x = self.normalize_inputs(states, actions)?;
        let mut means = Vec::with_capacity(self.members.len());
        let mut vars = Vec::with_capacity(self.members.len());
        for e in 0..self.members.len() {
            let (m, lv) = self.member_normalized(e, x.view())?;
            let mut mean = m;
            let mut var = lv;
            for ((mut mr, mut vr), sr) in mean.rows_mut().into_iter().zip(var.rows_mut()).zip(states.rows()) {
                for d in 0..self.state_dim {
                    mr[d] = sr[d] + self.target_mean[d] + self.target_std[d] * mr[d];
                    vr[d] = vr[d].exp() * self.target_std[d] * self.target_std[d];
                }
            }
            means.push(mean);
            vars.push(var);
        }
        Ok(EnsemblePrediction { means, vars })
    }

    /// Epistemic entropy per row.
    pub fn entropy_batch(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let pred = self.predict(states, actions)?;
        Ok(entropies(&pred, states.nrows(), self.state_dim))
    }

    pub fn epistemic_entropy(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let (sv, av) = row_views(s, a)?;
        Ok(self.entropy_batch(sv.view(), av.view())?[0])
    }

    fn thresholds(&self) -> Result<&CertainSetThresholds> {
        self.thresholds
            .as_ref()
            .ok_or_else(|| Error::Config("model thresholds not calibrated".into()))
    }

    /// One uncertainty-aware model step: uniform member, Gaussian draw, and
    /// certain-set membership of the predictive entropy.
    pub fn rollout_step(&self, s: &[f64], a: &[f64], rng: &mut SimRng) -> Result<ModelStepResult> {
        let (sv, av) = row_views(s, a)?;
        let pred = self.predict(sv.view(), av.view())?;
        let entropy = entropies(&pred, 1, self.state_dim)[0];
        let member = rng.random_range(0..self.members.len());
        let s_next = (0..self.state_dim)
            .map(|d| {
                let z: f64 = StandardNormal.sample(rng);
                pred.means[member][[0, d]] + pred.vars[member][[0, d]].sqrt() * z
            })
            .collect();
        let lambda1 = self.thresholds()?.lambda1;
        Ok(ModelStepResult {
            s_next,
            entropy,
            in_certain: entropy <= lambda1,
            member,
            member_means: pred.means.iter().map(|m| m.row(0).to_vec()).collect(),
            member_vars: pred.vars.iter().map(|v| v.row(0).to_vec()).collect(),
        })
    }

    /// Batched [`rollout_step`](Self::rollout_step): sampled next states and
    /// entropies for every row.
    pub fn step_batch(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let pred = self.predict(states, actions)?;
        let n = states.nrows();
        let ent = entropies(&pred, n, self.state_dim);
        let mut next = Array2::zeros((n, self.state_dim));
        for i in 0..n {
            let e = rng.random_range(0..self.members.len());
            for d in 0..self.state_dim {
                let z: f64 = StandardNormal.sample(rng);
                next[[i, d]] = pred.means[e][[i, d]] + pred.vars[e][[i, d]].sqrt() * z;
            }
        }
        Ok((next, ent))
    }

    /// Mean held-out NLL (normalized target space) averaged over members.
    fn nll(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
        let mut total = 0.0;
        for e in 0..self.members.len() {
            let (m, lv) = self.member_normalized(e, x)?;
            let mut acc = 0.0;
            ndarray::Zip::from(&m).and(&lv).and(y).for_each(|&mu, &l, &t| acc += gaussian_nll(t, mu, l));
            total += acc / (y.len() as f64);
        }
        Ok(total / self.members.len() as f64)
    }
}

fn row_views(s: &[f64], a: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
    let sv = Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
    let av = Array2::from_shape_vec((1, a.len()), a.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
    Ok((sv, av))
}

fn entropies(pred: &EnsemblePrediction, n: usize, ns: usize) -> Vec<f64> {
    let mut buf = vec![0.0; pred.means.len()];
    let mut out = Vec::with_capacity(n);
    let mut per_dim = vec![Vec::new(); ns];
    for i in 0..n {
        for (d, col) in per_dim.iter_mut().enumerate() {
            for (e, m) in pred.means.iter().enumerate() {
                buf[e] = m[[i, d]];
            }
            col.clear();
            col.extend_from_slice(&buf);
        }
        out.push(entropy_from_means(&per_dim));
    }
    out
}

/// Standardized training arrays.
struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
}

fn mean_std(data: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()));
    let std = data.std_axis(Axis(0), 0.0);
    (mean.to_vec(), std.iter().map(|s| s.max(STD_FLOOR)).collect())
}

/// Fit a fresh ensemble on `data` (Alg. 2 style): every gradient step trains
/// one uniformly sampled member on a mini-batch; an epoch is `E` passes worth
/// of steps; early stopping on held-out NLL with patience, keeping the best
/// parameters.
pub fn train_ensemble(
    data: &[Transition],
    cfg: &EnsembleConfig,
    rng: &mut SimRng,
) -> Result<(EnsembleModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Training("cannot train the model on an empty buffer".into()));
    }
    let ns = data[0].s.len();
    let na = data[0].a.len();
    let n_hold = ((data.len() as f64 * cfg.holdout_fraction).round() as usize)
        .min(cfg.max_holdout)
        .min(data.len().saturating_sub(cfg.batch_size));
    let n_train = data.len() - n_hold;
    if n_train < cfg.batch_size {
        return Err(Error::Training(format!(
            "buffer of {} transitions is smaller than the model batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut model = EnsembleModel::new(ns, na, cfg, rng)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let raw_x = Array2::from_shape_fn((data.len(), ns + na), |(i, j)| {
        let t = &data[order[i]];
        if j < ns {
            t.s[j]
        } else {
            t.a[j - ns]
        }
    });
    let raw_y = Array2::from_shape_fn((data.len(), ns), |(i, j)| {
        let t = &data[order[i]];
        t.s_next[j] - t.s[j]
    });
    let train_x = raw_x.slice(s![..n_train, ..]).to_owned();
    let train_y = raw_y.slice(s![..n_train, ..]).to_owned();
    (model.input_mean, model.input_std) = mean_std(&train_x);
    (model.target_mean, model.target_std) = mean_std(&train_y);
    let standardize = |x: &Array2<f64>, m: &[f64], s: &[f64]| {
        let mut x = x.clone();
        for mut row in x.rows_mut() {
            for ((v, mi), si) in row.iter_mut().zip(m).zip(s) {
                *v = (*v - mi) / si;
            }
        }
        x
    };
    let train = Dataset {
        x: standardize(&train_x, &model.input_mean, &model.input_std),
        y: standardize(&train_y, &model.target_mean, &model.target_std),
    };
    let hold = Dataset {
        x: standardize(&raw_x.slice(s![n_train.., ..]).to_owned(), &model.input_mean, &model.input_std),
        y: standardize(&raw_y.slice(s![n_train.., ..]).to_owned(), &model.target_mean, &model.target_std),
    };
    // with no held-out split, stop on the training loss instead
    let eval = if n_hold > 0 { &hold } else { &train };

    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opts: Vec<OptimizerState> = model.members.iter().map(|m| OptimizerState::new(m, adam)).collect();
    let mut bound_opt = VectorAdam::new(2 * ns, AdamConfig::with_lr(cfg.lr));
    let mut steps_per_epoch = cfg.members * n_train.div_ceil(cfg.batch_size);
    if cfg.max_epoch_steps > 0 {
        steps_per_epoch = steps_per_epoch.min(cfg.max_epoch_steps);
    }

    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut since_best = 0;
    let mut bx = Array2::zeros((cfg.batch_size, ns + na));
    let mut by = Array2::zeros((cfg.batch_size, ns));
    for epoch in 0..cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let e = rng.random_range(0..cfg.members);
            for r in 0..cfg.batch_size {
                let i = rng.random_range(0..n_train);
                bx.row_mut(r).assign(&train.x.row(i));
                by.row_mut(r).assign(&train.y.row(i));
            }
            epoch_loss += member_step(&mut model, e, &mut opts[e], &mut bound_opt, &bx, &by, cfg.bound_regularizer)?;
        }
        report.train_nll.push(epoch_loss / steps_per_epoch as f64);
        let held = model.nll(eval.x.view(), eval.y.view())?;
        report.holdout_nll.push(held);
        report.epochs = epoch + 1;
        log::debug!("model epoch {epoch}: train {:.4} held-out {held:.4}", report.train_nll[epoch]);
        if held < best.0 {
            best = (held, model.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, report))
}

/// One NLL gradient step on member `e`; returns the batch loss.
fn member_step(
    model: &mut EnsembleModel,
    e: usize,
    opt: &mut OptimizerState,
    bound_opt: &mut VectorAdam,
    x: &Array2<f64>,
    y: &Array2<f64>,
    bound_reg: f64,
) -> Result<f64> {
    let ns = model.state_dim;
    let b = x.nrows();
    let tape = model.members[e].forward_tape(x.view())?;
    let out = tape.output();
    let scale = 1.0 / (b * ns) as f64;
    let mut adjoint = Array2::zeros((b, 2 * ns));
    let mut d_hi = vec![0.0; ns];
    let mut d_lo = vec![0.0; ns];
    let mut loss = 0.0;
    for i in 0..b {
        for d in 0..ns {
            let mu = out[[i, d]];
            let (lv, dlv_raw, dlv_hi, dlv_lo) = model.bounded_logvar(out[[i, ns + d]], d);
            let inv = (-lv).exp();
            let err = mu - y[[i, d]];
            loss += 0.5 * (LN_2PI + lv + err * err * inv);
            adjoint[[i, d]] = err * inv * scale;
            let dl_dlv = 0.5 * (1.0 - err * err * inv) * scale;
            adjoint[[i, ns + d]] = dl_dlv * dlv_raw;
            d_hi[d] += dl_dlv * dlv_hi;
            d_lo[d] += dl_dlv * dlv_lo;
        }
    }
    loss *= scale;
    let reg: f64 = model.max_logvar.iter().zip(&model.min_logvar).map(|(h, l)| h - l).sum();
    loss += bound_reg * reg;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite model loss in member {e}")));
    }
    let (grads, _) = model.members[e].backward(&tape, adjoint.view())?;
    adam_step(opt, &mut model.members[e], &grads)?;
    let mut bounds: Vec<f64> = model.max_logvar.iter().chain(&model.min_logvar).copied().collect();
    let bound_grads: Vec<f64> = d_hi
        .iter()
        .map(|g| g + bound_reg)
        .chain(d_lo.iter().map(|g| g - bound_reg))
        .collect();
    bound_opt.step(&mut bounds, &bound_grads)?;
    model.max_logvar.copy_from_slice(&bounds[..ns]);
    model.min_logvar.copy_from_slice(&bounds[ns..]);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn normal(rng: &mut SimRng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig {
            members: 3,
            hidden: vec![32, 32],
            lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 64,
            patience: 5,
            max_epochs: 60,
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn nll_of_standard_normal_at_mean() {
        assert!((gaussian_nll(0.0, 0.0, 0.0) - 0.918_938_533_204_672_7).abs() < 1e-15);
        assert!((gaussian_nll(0.0, 0.0, 0.0) - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn soft_bounds_and_their_derivatives() {
        let mut rng = SimRng::seed_from_u64(0);
        let m = EnsembleModel::new(1, 1, &small_cfg(), &mut rng).unwrap();
        for raw in [-30.0, -9.0, -2.0, 0.0, 0.4, 3.0] {
            let (lv, d_raw, d_hi, d_lo) = m.bounded_logvar(raw, 0);
            assert!(lv > m.min_logvar[0] && lv < m.max_logvar[0]);
            let h = 1e-6;
            let fd = (m.bounded_logvar(raw + h, 0).0 - m.bounded_logvar(raw - h, 0).0) / (2.0 * h);
            assert!((fd - d_raw).abs() < 1e-6);
            let mut up = m.clone();
            up.max_logvar[0] += h;
            let mut dn = m.clone();
            dn.max_logvar[0] -= h;
            let fd = (up.bounded_logvar(raw, 0).0 - dn.bounded_logvar(raw, 0).0) / (2.0 * h);
            assert!((fd - d_hi).abs() < 1e-6);
            let mut up = m.clone();
            up.min_logvar[0] += h;
            let mut dn = m.clone();
            dn.min_logvar[0] -= h;
            let fd = (up.bounded_logvar(raw, 0).0 - dn.bounded_logvar(raw, 0).0) / (2.0 * h);
            assert!((fd - d_lo).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_members_or_data_is_an_error() {
        let mut rng = SimRng::seed_from_u64(0);
        let cfg = EnsembleConfig {
            members: 1,
            ..small_cfg()
        };
        assert!(EnsembleModel::new(2, 1, &cfg, &mut rng).is_err());
        assert!(train_ensemble(&[], &small_cfg(), &mut rng).is_err());
        let few: Vec<Transition> = (0..10)
            .map(|_| Transition {
                s: vec![0.0],
                a: vec![0.0],
                s_next: vec![0.0],
                r: 0.0,
                terminated: false,
                truncated: false,
            })
            .collect();
        assert!(matches!(train_ensemble(&few, &small_cfg(), &mut rng), Err(Error::Training(_))));
    }

    #[test]
    fn identity_dynamics_collapse_variance_to_the_floor() {
        let mut rng = SimRng::seed_from_u64(1);
        let data: Vec<Transition> = (0..2000)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                Transition {
                    s_next: s.clone(),
                    s,
                    a: vec![rng.random_range(-1.0..1.0)],
                    r: 0.0,
                    terminated: false,
                    truncated: false,
                }
            })
            .collect();
        let (m, _) = train_ensemble(&data, &small_cfg(), &mut rng).unwrap();
        let s = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -0.5, 0.7, 0.9, -0.9]).unwrap();
        let a = Array2::from_shape_vec((3, 1), vec![0.0, 0.5, -0.5]).unwrap();
        let pred = m.predict(s.view(), a.view()).unwrap();
        for e in 0..m.num_members() {
            for i in 0..3 {
                for d in 0..2 {
                    assert!((pred.means[e][[i, d]] - s[[i, d]]).abs() < 1e-4);
                    // deltas are exactly zero so the target scale is the std floor
                    assert!(pred.vars[e][[i, d]] <= STD_FLOOR * STD_FLOOR);
                }
            }
        }
    }

    #[test]
    fn linear_gaussian_system_recovers_noise_std() {
        let mut rng = SimRng::seed_from_u64(2);
        let sigma = 0.1;
        let gen = |rng: &mut SimRng| {
            let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = vec![rng.random_range(-1.0..1.0)];
            let s_next = vec![
                0.9 * s[0] + 0.2 * s[1] + sigma * normal(rng),
                -0.1 * s[0] + 0.8 * s[1] + 0.5 * a[0] + sigma * normal(rng),
            ];
            Transition {
                s,
                a,
                s_next,
                r: 0.0,
                terminated: false,
                truncated: false,
            }
        };
        let data: Vec<Transition> = (0..8000).map(|_| gen(&mut rng)).collect();
        let cfg = EnsembleConfig {
            lr: 1e-3,
            patience: 10,
            ..small_cfg()
        };
        let (m, report) = train_ensemble(&data, &cfg, &mut rng).unwrap();
        assert!(report.epochs >= 2);
        let test: Vec<Transition> = (0..200).map(|_| gen(&mut rng)).collect();
        let s = Array2::from_shape_fn((200, 2), |(i, j)| test[i].s[j]);
        let a = Array2::from_shape_fn((200, 1), |(i, _)| test[i].a[0]);
        let pred = m.predict(s.view(), a.view()).unwrap();
        for e in 0..m.num_members() {
            for v in pred.vars[e].iter() {
                let sd = v.sqrt();
                assert!((0.07..=0.13).contains(&sd), "predicted std {sd}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let mut rng = SimRng::seed_from_u64(3);
        let data: Vec<Transition> = (0..500)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                Transition {
                    s: vec![x],
                    a: vec![0.0],
                    s_next: vec![0.5 * x],
                    r: 0.0,
                    terminated: false,
                    truncated: false,
                }
            })
            .collect();
        let cfg = EnsembleConfig {
            max_epochs: 3,
            ..small_cfg()
        };
        let (a, _) = train_ensemble(&data, &cfg, &mut SimRng::seed_from_u64(9)).unwrap();
        let (b, _) = train_ensemble(&data, &cfg, &mut SimRng::seed_from_u64(9)).unwrap();
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.to_flat(), y.to_flat());
        }
    }
}
