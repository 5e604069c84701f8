//! Filter-policy learning on model rollouts and its model-based evaluation.

use ndarray::Array2;
use rand::Rng;

use super::policy::{apply_filter, decode_hyperplane, restrictiveness, Policy};
use super::shaping::{
    admits_high_return, return_threshold, BehaviorBranch, BehaviorPolicyMixture, MtfConfig, StartStateMixture,
    TrajectoryStore,
};
use super::TrainingRecord;
use crate::config::FilterConfig;
use crate::env::{clip_action, Env, SimRng};
use crate::error::{Error, Result};
use crate::filter::{expected_time_to_failure, filter_reward, FilterRewardSpec};
use crate::model::{CertainSetThresholds, EnsembleModel};
use crate::rl::{perturb, sample_noise_scale, ActionHead, AgentBundle, AgentConfig, NStepAccumulator, PinkNoise, ReplayBuffer};

/// How a model step ended the rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEnd {
    Continue,
    /// Left the certain safe set: failure state or untrusted prediction.
    Terminated,
    /// Horizon or information budget exhausted.
    Truncated,
}

/// Per-step and accumulated entropy guards plus the failure set.
#[derive(Clone, Copy, Debug)]
pub struct RolloutGate {
    pub thresholds: CertainSetThresholds,
    pub horizon: usize,
}

impl RolloutGate {
    /// Classify the step that produced `s_next` at time `t_next` and charge
    /// its information loss to `budget`.
    pub fn assess(&self, env: &dyn Env, entropy: f64, s_next: &[f64], t_next: usize, budget: &mut f64) -> StepEnd {
        if !self.thresholds.in_certain(entropy) || env.is_failure(s_next) {
            return StepEnd::Terminated;
        }
        *budget += self.thresholds.information_loss(entropy);
        if *budget > self.thresholds.lambda2 || t_next >= self.horizon {
            StepEnd::Truncated
        } else {
            StepEnd::Continue
        }
    }
}

/// Read-only inputs shared by all filter rollouts of one iteration.
pub struct FilterContext<'a> {
    pub env: &'a dyn Env,
    pub model: &'a EnsembleModel,
    pub gate: RolloutGate,
    /// Previous control policy; `None` before the first control phase, in
    /// which case the policy branch explores around the zero action.
    pub prev_policy: Option<&'a dyn Policy>,
    pub rho0: &'a [Vec<f64>],
}

impl FilterContext<'_> {
    fn behavior_means(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        let na = self.env.spec().action_dim;
        match self.prev_policy {
            Some(p) => p.act_batch(states.view()),
            None => Ok(Array2::zeros((states.nrows(), na))),
        }
    }
}

pub fn filter_agent_config(cfg: &FilterConfig, state_dim: usize, action_dim: usize, head: ActionHead) -> AgentConfig {
    AgentConfig {
        state_dim,
        action_dim,
        head,
        actor_hidden: cfg.actor_hidden.clone(),
        critic_hidden: cfg.critic_hidden.clone(),
        actor_lr: cfg.lr,
        critic_lr: cfg.lr,
        tau: cfg.tau,
        policy_delay: cfg.policy_delay,
        target_noise: cfg.sigma4,
        actor_init_scale: cfg.actor_init_scale,
    }
}

struct Slot {
    s: Vec<f64>,
    t: usize,
    budget: f64,
    branch: BehaviorBranch,
    behavior_noise: PinkNoise,
    filter_noise: PinkNoise,
    acc: NStepAccumulator,
}

/// Summary of one training round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterRoundStats {
    pub episodes: usize,
    pub terminated: usize,
    pub transitions: usize,
    pub updates: usize,
    pub critic_loss: f64,
}

/// Filter agent, its replay buffer and the persistent parallel rollouts.
pub struct FilterTrainer {
    pub cfg: FilterConfig,
    pub agent: AgentBundle,
    pub buffer: ReplayBuffer,
    pub reward: FilterRewardSpec,
    pub start_mixture: StartStateMixture,
    pub behavior: BehaviorPolicyMixture,
    slots: Vec<Slot>,
    pub steps: usize,
}

impl FilterTrainer {
    pub fn new(cfg: &FilterConfig, state_dim: usize, action_dim: usize, head: ActionHead, rng: &mut SimRng) -> Result<Self> {
        let agent = AgentBundle::new(filter_agent_config(cfg, state_dim, action_dim, head), rng);
        Ok(Self {
            cfg: cfg.clone(),
            buffer: ReplayBuffer::new(state_dim, head.repr_dim(action_dim), cfg.buffer_size),
            agent,
            reward: FilterRewardSpec::new(cfg.gamma_sf)?,
            start_mixture: StartStateMixture::new(cfg.nu1, cfg.nu2, cfg.nu3)?,
            behavior: BehaviorPolicyMixture::new(cfg.nu4, cfg.nu5)?,
            slots: Vec::new(),
            steps: 0,
        })
    }

    fn new_slot(
        &self,
        ctx: &FilterContext<'_>,
        failed: &TrajectoryStore,
        high: &TrajectoryStore,
        rng: &mut SimRng,
    ) -> Result<Slot> {
        let (s, _) = self.start_mixture.sample(ctx.rho0, failed, high, rng)?;
        let na = ctx.env.spec().action_dim;
        let branch = self.behavior.choose(rng);
        let sigma_b = match branch {
            BehaviorBranch::Policy => self.cfg.sigma2,
            BehaviorBranch::Noise => self.cfg.sigma3,
        };
        let sigma1 = sample_noise_scale(self.cfg.sigma_min, self.cfg.sigma_max, rng);
        Ok(Slot {
            s,
            t: 0,
            budget: 0.0,
            branch,
            behavior_noise: PinkNoise::new(na, sigma_b, rng.random()),
            filter_noise: PinkNoise::new(self.agent.config.repr_dim(), sigma1, rng.random()),
            acc: NStepAccumulator::new(self.cfg.n_step, self.cfg.gamma_sf),
        })
    }

    /// Run `steps` vectorized rollout steps with interleaved TD3 updates.
    pub fn train_round(
        &mut self,
        ctx: &FilterContext<'_>,
        failed: &TrajectoryStore,
        high: &TrajectoryStore,
        steps: usize,
        iteration: usize,
        log: &mut Vec<TrainingRecord>,
        rng: &mut SimRng,
    ) -> Result<FilterRoundStats> {
        let ns = ctx.env.spec().state_dim;
        let head = self.agent.config.head;
        while self.slots.len() < self.cfg.rollouts {
            let slot = self.new_slot(ctx, failed, high, rng)?;
            self.slots.push(slot);
        }
        let mut stats = FilterRoundStats::default();
        let mut first_step_exits = 0;
        let mut loss_sum = 0.0;
        let mut out = Vec::new();
        let record_every = (steps / 20).max(1);
        for step in 0..steps {
            let r = self.slots.len();
            let states = Array2::from_shape_fn((r, ns), |(i, j)| self.slots[i].s[j]);
            let means = ctx.behavior_means(&states)?;
            let greedy = self.agent.act_batch(states.view())?;
            let mut us = Vec::with_capacity(r);
            let mut applied = Array2::zeros((r, ctx.env.spec().action_dim));
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let noise = slot.behavior_noise.sample();
                let mut a: Vec<f64> = match slot.branch {
                    BehaviorBranch::Policy => means.row(i).iter().zip(&noise).map(|(m, e)| m + e).collect(),
                    BehaviorBranch::Noise => noise,
                };
                clip_action(&mut a);
                let u = perturb(head, greedy.row(i).as_slice().unwrap_or(&greedy.row(i).to_vec()), &slot.filter_noise.sample());
                let h = decode_hyperplane(head, &u)?;
                let a_v = apply_filter(&a, Some(&h))?;
                applied.row_mut(i).iter_mut().zip(&a_v).for_each(|(d, v)| *d = *v);
                us.push(u);
            }
            let (next, entropy) = ctx.model.step_batch(states.view(), applied.view(), rng)?;
            for i in 0..r {
                let s_next = next.row(i).to_vec();
                let slot = &mut self.slots[i];
                let end = ctx.gate.assess(ctx.env, entropy[i], &s_next, slot.t + 1, &mut slot.budget);
                let terminated = end == StepEnd::Terminated;
                let rew = filter_reward(!terminated, &self.reward);
                out.clear();
                slot.acc.push(&slot.s, &us[i], rew, &s_next, terminated, end == StepEnd::Truncated, &mut out);
                for t in &out {
                    self.buffer.push(t)?;
                }
                stats.transitions += 1;
                slot.t += 1;
                slot.s = s_next;
                if end != StepEnd::Continue {
                    stats.episodes += 1;
                    if terminated {
                        stats.terminated += 1;
                        if slot.t == 1 && !ctx.gate.thresholds.in_certain(entropy[i]) {
                            first_step_exits += 1;
                        }
                    }
                    self.slots[i] = self.new_slot(ctx, failed, high, rng)?;
                }
            }
            self.steps += 1;
            if self.buffer.len() >= self.cfg.warmup.max(self.cfg.batch_size) {
                for _ in 0..self.cfg.updates_per_step {
                    let batch = self.buffer.sample(self.cfg.batch_size, rng)?;
                    let up = self.agent.update(&batch, self.cfg.c, rng)?;
                    loss_sum += up.critic_loss;
                    stats.updates += 1;
                    if step % record_every == 0 && up.actor_objective.is_some() {
                        log.push(TrainingRecord {
                            phase: "filter".into(),
                            iteration,
                            step: self.steps,
                            critic_loss: up.critic_loss,
                            actor_objective: up.actor_objective.unwrap_or(f64::NAN),
                            mean_u_norm: mean_restrictiveness(head, &self.agent.act_batch(batch.s.view())?),
                            buffer_len: self.buffer.len(),
                            aux_buffer_len: 0,
                        });
                    }
                }
            }
        }
        if stats.episodes > 0 && first_step_exits == stats.episodes {
            return Err(Error::Training(
                "every filter rollout left the certain set on its first step; the start states lie outside \
                 the model's certain set, recalibrate the entropy thresholds"
                    .into(),
            ));
        }
        stats.critic_loss = if stats.updates > 0 { loss_sum / stats.updates as f64 } else { f64::NAN };
        Ok(stats)
    }
}

pub fn mean_restrictiveness(head: ActionHead, reprs: &Array2<f64>) -> f64 {
    if reprs.nrows() == 0 {
        return f64::NAN;
    }
    reprs
        .rows()
        .into_iter()
        .map(|r| restrictiveness(head, &r.to_vec()))
        .sum::<f64>()
        / reprs.nrows() as f64
}

/// Outcome of one model-based evaluation of a greedy filter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterEvaluation {
    pub rollouts: usize,
    pub failures: usize,
    /// Mean time in the certain safe set; truncated rollouts count as the
    /// full horizon.
    pub mean_len: f64,
    pub mean_return: f64,
    /// Mean restrictiveness of the greedy filter over visited states.
    pub mean_u_norm: f64,
    pub failed_added: usize,
    pub high_return_added: usize,
    /// `(length, terminated)` per rollout.
    pub outcomes: Vec<(usize, bool)>,
}

struct EvalTrace {
    states: Vec<Vec<f64>>,
    ret: f64,
    budget: f64,
    end: StepEnd,
    branch: BehaviorBranch,
    noise: PinkNoise,
}

/// Greedy-filter rollouts from `ρ0^EVAL`; harvests near-failure states into
/// `failed` and viable high-return states into `high`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_filter(
    agent: &AgentBundle,
    ctx: &FilterContext<'_>,
    cfg: &FilterConfig,
    n: usize,
    failed: &mut TrajectoryStore,
    high: &mut TrajectoryStore,
    rng: &mut SimRng,
) -> Result<FilterEvaluation> {
    let spec = ctx.env.spec();
    let (ns, na) = (spec.state_dim, spec.action_dim);
    let head = agent.config.head;
    let behavior = BehaviorPolicyMixture::new(cfg.nu4, cfg.nu5)?;
    let eval_mix = StartStateMixture::new(cfg.eval_rho0_share, 0.0, 1.0 - cfg.eval_rho0_share)?;
    let empty = TrajectoryStore::new(1);
    let mut traces = Vec::with_capacity(n);
    for _ in 0..n {
        let (s, _) = eval_mix.sample(ctx.rho0, &empty, high, rng)?;
        let branch = behavior.choose(rng);
        let sigma = match branch {
            BehaviorBranch::Policy => cfg.sigma2,
            BehaviorBranch::Noise => cfg.sigma3,
        };
        traces.push(EvalTrace {
            states: vec![s],
            ret: 0.0,
            budget: 0.0,
            end: StepEnd::Continue,
            branch,
            noise: PinkNoise::new(na, sigma, rng.random()),
        });
    }
    let mut u_sum = 0.0;
    let mut u_count = 0usize;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| traces[i].end == StepEnd::Continue).collect();
        if active.is_empty() {
            break;
        }
        let states = Array2::from_shape_fn((active.len(), ns), |(k, j)| traces[active[k]].states.last().unwrap()[j]);
        let means = ctx.behavior_means(&states)?;
        let us = agent.act_batch(states.view())?;
        let mut applied = Array2::zeros((active.len(), na));
        for (k, &i) in active.iter().enumerate() {
            let tr = &mut traces[i];
            let noise = tr.noise.sample();
            let mut a: Vec<f64> = match tr.branch {
                BehaviorBranch::Policy => means.row(k).iter().zip(&noise).map(|(m, e)| m + e).collect(),
                BehaviorBranch::Noise => noise,
            };
            clip_action(&mut a);
            let u = us.row(k).to_vec();
            u_sum += restrictiveness(head, &u);
            u_count += 1;
            let a_v = apply_filter(&a, Some(&decode_hyperplane(head, &u)?))?;
            applied.row_mut(k).iter_mut().zip(&a_v).for_each(|(d, v)| *d = *v);
        }
        let (next, entropy) = ctx.model.step_batch(states.view(), applied.view(), rng)?;
        for (k, &i) in active.iter().enumerate() {
            let tr = &mut traces[i];
            let s_next = next.row(k).to_vec();
            let t_next = tr.states.len();
            tr.end = ctx.gate.assess(ctx.env, entropy[k], &s_next, t_next, &mut tr.budget);
            let s = tr.states.last().unwrap();
            tr.ret += ctx.env.reward(s, &applied.row(k).to_vec(), &s_next);
            tr.states.push(s_next);
        }
    }

    let horizon = ctx.gate.horizon as f64;
    let mut eval = FilterEvaluation {
        rollouts: n,
        mean_u_norm: if u_count > 0 { u_sum / u_count as f64 } else { f64::NAN },
        ..FilterEvaluation::default()
    };
    let mtf = MtfConfig {
        early: cfg.mtf_early,
        late: cfg.mtf_late,
        num: cfg.mtf_num,
    };
    let truncated_returns: Vec<f64> = traces.iter().filter(|t| t.end == StepEnd::Truncated).map(|t| t.ret).collect();
    let threshold = return_threshold(&truncated_returns, cfg.tg_return_quantile);
    let ttf_min = cfg.tg_ttf_fraction * horizon;
    let mut len_sum = 0.0;
    let mut ret_sum = 0.0;
    for tr in &traces {
        let len = tr.states.len() - 1;
        let terminated = tr.end == StepEnd::Terminated;
        eval.outcomes.push((len, terminated));
        ret_sum += tr.ret;
        if terminated {
            eval.failures += 1;
            len_sum += len as f64;
            // the state at `len` is the one outside the certain safe set
            for idx in mtf.window(len, rng) {
                failed.push(tr.states[idx].clone());
                eval.failed_added += 1;
            }
        } else {
            len_sum += horizon;
            let Some(thr) = threshold else { continue };
            if tr.ret < thr {
                continue;
            }
            let k = cfg.mtf_num.min(tr.states.len());
            for idx in rand::seq::index::sample(rng, tr.states.len(), k) {
                let s = &tr.states[idx];
                let u = agent.act(s)?;
                // steps survived after `idx` bound the time to failure from below
                let survived = (tr.states.len() - 1 - idx) as f64;
                let ttf = expected_time_to_failure(agent.q1(s, &u)?, cfg.gamma_sf).max(survived);
                if admits_high_return(tr.ret, thr, ttf, ttf_min) {
                    high.push(s.clone());
                    eval.high_return_added += 1;
                }
            }
        }
    }
    if n > 0 {
        eval.mean_len = len_sum / n as f64;
        eval.mean_return = ret_sum / n as f64;
    }
    Ok(eval)
}

/// Plateau-and-length stopping rule for the train/evaluate loop.
pub fn filter_passes(mean_len: f64, best_before: Option<f64>, cfg: &FilterConfig, horizon: usize) -> bool {
    let Some(best) = best_before else { return false };
    let improvement = if best > 0.0 { (mean_len - best) / best } else { f64::INFINITY };
    improvement < cfg.plateau_tolerance && mean_len >= cfg.pass_fraction * horizon as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};
    use crate::env::{EnvId, SlopeCar};

    fn gate(l1: f64, l0: f64, l2: f64, horizon: usize) -> RolloutGate {
        RolloutGate {
            thresholds: CertainSetThresholds {
                lambda1: l1,
                lambda0: l0,
                lambda2: l2,
            },
            horizon,
        }
    }

    #[test]
    fn gate_terminates_on_failure_or_uncertainty() {
        let env = SlopeCar::default();
        let g = gate(1.0, 0.0, 10.0, 100);
        let mut budget = 0.0;
        assert_eq!(g.assess(&env, 0.5, &[0.0, 0.0], 1, &mut budget), StepEnd::Continue);
        assert_eq!(budget, 0.5);
        assert_eq!(g.assess(&env, 1.5, &[0.0, 0.0], 2, &mut budget), StepEnd::Terminated);
        assert_eq!(g.assess(&env, 0.5, &[2.5, 0.0], 2, &mut budget), StepEnd::Terminated);
        // budget charge only above λ0
        let mut b = 0.0;
        assert_eq!(g.assess(&env, -3.0, &[0.0, 0.0], 1, &mut b), StepEnd::Continue);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn gate_truncates_on_budget_or_horizon() {
        let env = SlopeCar::default();
        let g = gate(1.0, 0.0, 1.0, 5);
        let mut budget = 0.0;
        assert_eq!(g.assess(&env, 0.6, &[0.0, 0.0], 1, &mut budget), StepEnd::Continue);
        assert_eq!(g.assess(&env, 0.6, &[0.0, 0.0], 2, &mut budget), StepEnd::Truncated);
        let mut budget = 0.0;
        assert_eq!(g.assess(&env, 0.0, &[0.0, 0.0], 5, &mut budget), StepEnd::Truncated);
    }

    #[test]
    fn pass_rule_needs_plateau_and_length() {
        let cfg = RunConfig::new(EnvId::SlopeCar, Profile::Desk).filter;
        assert!(!filter_passes(200.0, None, &cfg, 200));
        assert!(filter_passes(199.0, Some(198.0), &cfg, 200));
        assert!(!filter_passes(150.0, Some(100.0), &cfg, 200));
        assert!(!filter_passes(100.0, Some(100.0), &cfg, 200));
        assert!(filter_passes(185.0, Some(190.0), &cfg, 200));
    }

    #[test]
    fn agent_config_follows_filter_config() {
        let cfg = RunConfig::new(EnvId::CartPole, Profile::Paper).filter;
        let a = filter_agent_config(&cfg, 4, 1, ActionHead::Ball);
        assert_eq!(a.target_noise, 0.003);
        assert_eq!(a.tau, 0.001);
        assert_eq!(a.policy_delay, 2);
        assert_eq!(a.actor_lr, 3e-4);
    }
}
