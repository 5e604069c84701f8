//! Deterministic actor with twin critics, clipped double-Q targets, target
//! policy smoothing and delayed actor updates.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::buffer::Batch;
use super::nstep::nstep_return;
use crate::approx::{adam_step, polyak_update, Activation, AdamConfig, MlpParams, OptimizerState};
use crate::env::{SimRng, Transition};
use crate::error::{Error, Result};
use crate::filter::{l2, raw_restrictiveness, squash_backward, squash_to_ball};

/// How the actor's network output becomes the action seen by the critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionHead {
    /// `tanh` output in the box `[-1, 1]^n` (control policies).
    Box,
    /// `tanh` output squashed into the unit ball (hyperplane actions `u`).
    Ball,
    /// Unbounded `(w̃, b̃)` of dimension `n + 1` (raw-hyperplane ablation).
    Raw,
}

impl ActionHead {
    pub fn repr_dim(self, action_dim: usize) -> usize {
        match self {
            ActionHead::Raw => action_dim + 1,
            _ => action_dim,
        }
    }

    fn output_activation(self) -> Activation {
        match self {
            ActionHead::Raw => Activation::Identity,
            _ => Activation::Tanh,
        }
    }

    /// Network output row to action representation.
    pub fn map(self, o: &[f64]) -> Vec<f64> {
        match self {
            ActionHead::Ball => squash_to_ball(o),
            _ => o.to_vec(),
        }
    }

    /// Bring a perturbed action back into the head's admissible set.
    pub fn constrain(self, a: &mut [f64]) {
        match self {
            ActionHead::Box => a.iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0)),
            ActionHead::Ball => {
                let u = squash_to_ball(a);
                a.copy_from_slice(&u);
            }
            ActionHead::Raw => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub state_dim: usize,
    /// Environment action dimension.
    pub action_dim: usize,
    pub head: ActionHead,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Polyak factor for all target networks.
    pub tau: f64,
    /// Actor and targets are updated every `policy_delay` critic updates.
    pub policy_delay: usize,
    /// Std of the target-policy smoothing noise.
    pub target_noise: f64,
    /// Scale applied to the actor's last layer at initialization.
    pub actor_init_scale: f64,
}

impl AgentConfig {
    pub fn repr_dim(&self) -> usize {
        self.head.repr_dim(self.action_dim)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Present on steps where the delayed actor update ran.
    pub actor_objective: Option<f64>,
}

/// Actor, twin critics, their targets and optimizer state.
#[derive(Clone, Debug)]
pub struct AgentBundle {
    pub config: AgentConfig,
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    pub critics: [MlpParams; 2],
    pub critic_targets: [MlpParams; 2],
    actor_opt: OptimizerState,
    critic_opts: [OptimizerState; 2],
    pub critic_updates: u64,
    pub actor_updates: u64,
}

impl AgentBundle {
    pub fn new(config: AgentConfig, rng: &mut SimRng) -> Self {
        let repr = config.repr_dim();
        let mut actor_sizes = vec![config.state_dim];
        actor_sizes.extend(&config.actor_hidden);
        actor_sizes.push(repr);
        let mut actor = MlpParams::init(&actor_sizes, Activation::Tanh, config.head.output_activation(), rng);
        actor.scale_output_layer(config.actor_init_scale);
        let mut critic_sizes = vec![config.state_dim + repr];
        critic_sizes.extend(&config.critic_hidden);
        critic_sizes.push(1);
        let critics = [
            MlpParams::init(&critic_sizes, Activation::Relu, Activation::Identity, rng),
            MlpParams::init(&critic_sizes, Activation::Relu, Activation::Identity, rng),
        ];
        Self::from_networks(config, actor, critics)
    }

    /// Bundle around given networks; targets start as copies.
    pub fn from_networks(config: AgentConfig, actor: MlpParams, critics: [MlpParams; 2]) -> Self {
        let actor_opt = OptimizerState::new(&actor, AdamConfig::with_lr(config.actor_lr));
        let critic_opts = [
            OptimizerState::new(&critics[0], AdamConfig::with_lr(config.critic_lr)),
            OptimizerState::new(&critics[1], AdamConfig::with_lr(config.critic_lr)),
        ];
        Self {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            config,
            actor,
            critics,
            actor_opt,
            critic_opts,
            critic_updates: 0,
            actor_updates: 0,
        }
    }

    /// Greedy action representation for one state.
    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        let o = self.actor.forward_one(s)?;
        Ok(self.config.head.map(&o))
    }

    pub fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        map_rows(self.config.head, &self.actor.forward(states)?)
    }

    /// `Q₁(s, a)`.
    pub fn q1(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(self.critics[0].forward_one(&x)?[0])
    }

    /// `min(Q₁, Q₂)` at `(s, μ(s))` for a batch of states.
    pub fn value_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let a = self.act_batch(states)?;
        let x = concatenate(Axis(1), &[states, a.view()]).map_err(|e| Error::Config(e.to_string()))?;
        let q1 = self.critics[0].forward(x.view())?;
        let q2 = self.critics[1].forward(x.view())?;
        Ok(Array1::from_iter(q1.iter().zip(q2.iter()).map(|(a, b)| a.min(*b))))
    }

    /// Smoothed target action `constrain(μ̄(s) + σ·ε)`.
    fn target_actions(&self, states: ArrayView2<'_, f64>, sigma: f64, rng: &mut SimRng) -> Result<Array2<f64>> {
        let mut a = map_rows(self.config.head, &self.actor_target.forward(states)?)?;
        for mut row in a.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            if sigma > 0.0 {
                for x in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *x += sigma * e;
                }
            }
            self.config.head.constrain(row);
        }
        Ok(a)
    }

    /// Clipped double-Q bootstrap `min_i Q̄_i(s, ã)` per row.
    pub fn bootstrap_values(&self, states: ArrayView2<'_, f64>, sigma: f64, rng: &mut SimRng) -> Result<Array1<f64>> {
        let a = self.target_actions(states, sigma, rng)?;
        let x = concatenate(Axis(1), &[states, a.view()]).map_err(|e| Error::Config(e.to_string()))?;
        let q1 = self.critic_targets[0].forward(x.view())?;
        let q2 = self.critic_targets[1].forward(x.view())?;
        Ok(Array1::from_iter(q1.iter().zip(q2.iter()).map(|(a, b)| a.min(*b))))
    }

    /// TD targets `ret + discount · min_i Q̄_i(s_boot, ã)`.
    pub fn td_targets(&self, batch: &Batch, rng: &mut SimRng) -> Result<Array1<f64>> {
        let boot = self.bootstrap_values(batch.s_boot.view(), self.config.target_noise, rng)?;
        Ok(&batch.ret + &(&batch.discount * &boot))
    }

    /// One Adam step on each critic toward the shared target; returns the
    /// mean squared TD error averaged over both critics.
    pub fn critic_update(&mut self, batch: &Batch, rng: &mut SimRng) -> Result<f64> {
        let y = self.td_targets(batch, rng)?;
        let x = concatenate(Axis(1), &[batch.s.view(), batch.a.view()]).map_err(|e| Error::Config(e.to_string()))?;
        let n = batch.len() as f64;
        let mut total = 0.0;
        for k in 0..2 {
            let tape = self.critics[k].forward_tape(x.view())?;
            let q = tape.output().column(0).to_owned();
            let err = &q - &y;
            let loss = err.mapv(|e| e * e).sum() / n;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite critic loss (critic {k}, update {}): max |y| = {:.3e}, max |Q| = {:.3e}",
                    self.critic_updates,
                    y.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    q.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                )));
            }
            total += loss;
            let adjoint = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
            let (grads, _) = self.critics[k].backward(&tape, adjoint.view())?;
            adam_step(&mut self.critic_opts[k], &mut self.critics[k], &grads)?;
        }
        self.critic_updates += 1;
        Ok(total / 2.0)
    }

    /// Ascent step on `mean[Q₁(s, μ(s)) − c·reg(μ(s))]` followed by Polyak
    /// averaging of all targets. `reg` is `‖u‖` for the ball head, the
    /// decoded restrictiveness for the raw head and zero for the box head.
    pub fn actor_update(&mut self, states: ArrayView2<'_, f64>, c: f64) -> Result<f64> {
        let head = self.config.head;
        let n = states.nrows();
        let tape = self.actor.forward_tape(states)?;
        let out = tape.output().clone();
        let a = map_rows(head, &out)?;
        let x = concatenate(Axis(1), &[states, a.view()]).map_err(|e| Error::Config(e.to_string()))?;
        let ctape = self.critics[0].forward_tape(x.view())?;
        let q = ctape.output().column(0).to_owned();
        let ones = Array2::from_elem((n, 1), 1.0);
        let (_, dq_dx) = self.critics[0].backward(&ctape, ones.view())?;
        let dq_da = dq_dx.slice(s![.., self.config.state_dim..]).to_owned();

        let mut objective = q.sum();
        let mut adjoint = Array2::zeros(out.dim());
        for i in 0..n {
            let o = out.row(i).to_vec();
            let ai = a.row(i).to_vec();
            // ∂J/∂a for this row
            let mut g: Vec<f64> = dq_da.row(i).to_vec();
            match head {
                ActionHead::Ball if c != 0.0 => {
                    let norm = l2(&ai);
                    objective -= c * norm;
                    if norm > 0.0 {
                        for (gj, aj) in g.iter_mut().zip(&ai) {
                            *gj -= c * aj / norm;
                        }
                    }
                }
                ActionHead::Raw if c != 0.0 => {
                    let (l, dl) = raw_restrictiveness(&ai);
                    objective -= c * l;
                    for (gj, d) in g.iter_mut().zip(&dl) {
                        *gj -= c * d;
                    }
                }
                _ => {}
            }
            let g_out = if head == ActionHead::Ball { squash_backward(&o, &g) } else { g };
            // minimize −J
            for (dst, v) in adjoint.row_mut(i).iter_mut().zip(g_out) {
                *dst = -v / n as f64;
            }
        }
        let objective = objective / n as f64;
        if !objective.is_finite() {
            return Err(Error::Training(format!(
                "non-finite actor objective at actor update {}",
                self.actor_updates
            )));
        }
        let (grads, _) = self.actor.backward(&tape, adjoint.view())?;
        adam_step(&mut self.actor_opt, &mut self.actor, &grads)?;
        self.actor_updates += 1;
        self.update_targets()?;
        Ok(objective)
    }

    /// Filter actor objective `mean[Q^SF(s, μ(s)) − c‖μ(s)‖]`.
    pub fn actor_update_filter(&mut self, batch: &Batch, c: f64) -> Result<f64> {
        self.actor_update(batch.s.view(), c)
    }

    /// Control actor objective `mean[Q(s, π(s))]`.
    pub fn actor_update_control(&mut self, batch: &Batch) -> Result<f64> {
        self.actor_update(batch.s.view(), 0.0)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        polyak_update(&mut self.actor_target, &self.actor, tau)?;
        for k in 0..2 {
            polyak_update(&mut self.critic_targets[k], &self.critics[k], tau)?;
        }
        Ok(())
    }

    /// Critic step, plus the delayed actor step when due.
    pub fn update(&mut self, batch: &Batch, c: f64, rng: &mut SimRng) -> Result<UpdateStats> {
        let critic_loss = self.critic_update(batch, rng)?;
        let actor_objective = if self.critic_updates % self.config.policy_delay.max(1) as u64 == 0 {
            Some(self.actor_update(batch.s.view(), c)?)
        } else {
            None
        };
        Ok(UpdateStats {
            critic_loss,
            actor_objective,
        })
    }
}

fn map_rows(head: ActionHead, out: &Array2<f64>) -> Result<Array2<f64>> {
    if head != ActionHead::Ball {
        return Ok(out.clone());
    }
    let mut a = out.clone();
    for mut row in a.rows_mut() {
        let u = squash_to_ball(row.as_slice().unwrap());
        row.as_slice_mut().unwrap().copy_from_slice(&u);
    }
    Ok(a)
}

/// n-step TD target for one contiguous window of transitions:
/// `Σ γ^k r_k + γ^n min_i Q̄_i(s_n, μ̄(s_n) + σ·ε)`, stopping at the first
/// terminal step without bootstrapping.
pub fn nstep_target(window: &[Transition], bundle: &AgentBundle, sigma: f64, gamma: f64, rng: &mut SimRng) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::Config("empty n-step window".into()));
    }
    let rewards: Vec<f64> = window.iter().map(|t| t.r).collect();
    let terminal: Vec<bool> = window.iter().map(|t| t.terminated).collect();
    let (ret, disc) = nstep_return(&rewards, &terminal, gamma);
    if disc == 0.0 {
        return Ok(ret);
    }
    let last = &window[window.len() - 1].s_next;
    let s = Array2::from_shape_vec((1, last.len()), last.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let boot = bundle.bootstrap_values(s.view(), sigma, rng)?;
    Ok(ret + disc * boot[0])
}

/// Deterministic exploration helper: `a + noise`, constrained to the head.
pub fn perturb(head: ActionHead, a: &[f64], noise: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().zip(noise).map(|(x, e)| x + e).collect();
    head.constrain(&mut out);
    out
}

/// Uniform random action representation (used for warm-up).
pub fn random_action(head: ActionHead, action_dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..head.repr_dim(action_dim)).map(|_| rng.random_range(-1.0..=1.0)).collect();
    head.map(&raw)
}
