//! Filtered control learning with real-environment data collection.

use ndarray::Array2;
use rand::Rng;

use super::filter_phase::RolloutGate;
use super::policy::{apply_filter, filter_penalty, Policy, SafetyFilter};
use super::TrainingRecord;
use crate::config::ControlConfig;
use crate::env::{clip_action, Env, SimRng, Transition};
use crate::error::Result;
use crate::filter::Hyperplane;
use crate::model::EnsembleModel;
use crate::rl::{sample_noise_scale, sample_union, ActionHead, AgentBundle, AgentConfig, PinkNoise, ReplayBuffer, StoredTransition};

pub fn control_agent_config(cfg: &ControlConfig, state_dim: usize, action_dim: usize) -> AgentConfig {
    AgentConfig {
        state_dim,
        action_dim,
        head: ActionHead::Box,
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

/// One real step of the filtered control loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlStep {
    pub s_next: Vec<f64>,
    /// Proposed (unfiltered) action.
    pub a: Vec<f64>,
    /// Executed (filtered) action.
    pub a_v: Vec<f64>,
    pub r: f64,
    pub penalty: f64,
    pub failure: bool,
    pub truncated: bool,
}

/// Execute the filtered action of `a` in the environment and record it:
/// `{s, a^V, s', r}` into the model buffer and `{s, a, s', r − ‖a^V − a‖}`
/// into the environment control buffer.
#[allow(clippy::too_many_arguments)]
pub fn control_env_step(
    env: &dyn Env,
    s: &[f64],
    a: &[f64],
    h: Option<&Hyperplane>,
    t: usize,
    gamma: f64,
    model_data: &mut Vec<Transition>,
    env_control: &mut ReplayBuffer,
    rng: &mut SimRng,
) -> Result<ControlStep> {
    let a_v = apply_filter(a, h)?;
    let s_next = env.step(s, &a_v, rng);
    let r = env.reward(s, &a_v, &s_next);
    let failure = env.is_failure(&s_next);
    let truncated = !failure && t + 1 >= env.spec().max_episode_steps;
    let penalty = filter_penalty(a, &a_v);
    model_data.push(Transition {
        s: s.to_vec(),
        a: a_v.clone(),
        s_next: s_next.clone(),
        r,
        terminated: failure,
        truncated,
    });
    env_control.push(&StoredTransition {
        s: s.to_vec(),
        a: a.to_vec(),
        ret: r - penalty,
        s_boot: s_next.clone(),
        discount: if failure { 0.0 } else { gamma },
    })?;
    Ok(ControlStep {
        s_next,
        a: a.to_vec(),
        a_v,
        r,
        penalty,
        failure,
        truncated,
    })
}

/// Model rollouts of the filtered exploring control policy from `starts`;
/// transitions with the unfiltered action and penalized reward go to `out`.
/// Steps whose prediction is outside the certain set are dropped and end
/// the rollout. Returns the number of stored transitions.
#[allow(clippy::too_many_arguments)]
pub fn control_model_rollouts(
    env: &dyn Env,
    model: &EnsembleModel,
    gate: &RolloutGate,
    policy: &dyn Policy,
    filter: &dyn SafetyFilter,
    starts: Vec<Vec<f64>>,
    cfg: &ControlConfig,
    out: &mut ReplayBuffer,
    rng: &mut SimRng,
) -> Result<usize> {
    let spec = env.spec();
    let (ns, na) = (spec.state_dim, spec.action_dim);
    let n = starts.len();
    let mut states = starts;
    let mut budgets = vec![0.0; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut noises: Vec<PinkNoise> = (0..n)
        .map(|_| {
            let sigma = sample_noise_scale(cfg.sigma_min, cfg.sigma_max, rng);
            PinkNoise::new(na, sigma, rng.random())
        })
        .collect();
    let mut stored = 0;
    for t in 0..cfg.rollout_horizon {
        if active.is_empty() {
            break;
        }
        let s_mat = Array2::from_shape_fn((active.len(), ns), |(k, j)| states[active[k]][j]);
        let means = policy.act_batch(s_mat.view())?;
        let planes = filter.hyperplanes(s_mat.view())?;
        let mut proposed = Vec::with_capacity(active.len());
        let mut applied = Array2::zeros((active.len(), na));
        for (k, &i) in active.iter().enumerate() {
            let noise = noises[i].sample();
            let mut a: Vec<f64> = means.row(k).iter().zip(&noise).map(|(m, e)| m + e).collect();
            clip_action(&mut a);
            let a_v = apply_filter(&a, planes[k].as_ref())?;
            applied.row_mut(k).iter_mut().zip(&a_v).for_each(|(d, v)| *d = *v);
            proposed.push(a);
        }
        let (next, entropy) = model.step_batch(s_mat.view(), applied.view(), rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            if !gate.thresholds.in_certain(entropy[k]) {
                continue;
            }
            let s_next = next.row(k).to_vec();
            let a_v = applied.row(k).to_vec();
            let failure = env.is_failure(&s_next);
            let r = env.reward(&states[i], &a_v, &s_next) - filter_penalty(&proposed[k], &a_v);
            out.push(&StoredTransition {
                s: states[i].clone(),
                a: proposed[k].clone(),
                ret: r,
                s_boot: s_next.clone(),
                discount: if failure { 0.0 } else { cfg.gamma },
            })?;
            stored += 1;
            budgets[i] += gate.thresholds.information_loss(entropy[k]);
            if !failure && budgets[i] <= gate.thresholds.lambda2 && t + 1 < cfg.rollout_horizon {
                states[i] = s_next;
                still.push(i);
            }
        }
        active = still;
    }
    Ok(stored)
}

/// Result of one control phase.
pub struct ControlOutcome {
    pub agent: AgentBundle,
    /// `{s, a^V, s', r}` of every real step, appended to the model data.
    pub env_transitions: Vec<Transition>,
    pub env_control: ReplayBuffer,
    pub model_control: ReplayBuffer,
    pub failures: usize,
    pub episodes: usize,
    pub mean_penalty: f64,
}

/// Inputs of one control phase.
pub struct ControlContext<'a> {
    pub env: &'a dyn Env,
    pub model: &'a EnsembleModel,
    pub gate: RolloutGate,
    pub filter: &'a dyn SafetyFilter,
}

/// Train a fresh control agent for `cfg.env_steps` real steps, filtering
/// every executed action.
pub fn train_control_policy(
    ctx: &ControlContext<'_>,
    cfg: &ControlConfig,
    iteration: usize,
    log: &mut Vec<TrainingRecord>,
    rng: &mut SimRng,
) -> Result<ControlOutcome> {
    let spec = ctx.env.spec();
    let (ns, na) = (spec.state_dim, spec.action_dim);
    let mut agent = AgentBundle::new(control_agent_config(cfg, ns, na), rng);
    let mut env_control = ReplayBuffer::new(ns, na, cfg.buffer_size);
    let mut model_control = ReplayBuffer::new(ns, na, cfg.buffer_size);
    let mut env_transitions = Vec::with_capacity(cfg.env_steps);
    let mut noise = PinkNoise::new(na, cfg.sigma2, rng.random());
    let mut s = ctx.env.sample_initial(rng);
    let mut t = 0;
    let (mut failures, mut episodes) = (0, 0);
    let mut penalty_sum = 0.0;
    let record_every = (cfg.env_steps / 50).max(1);
    for step in 0..cfg.env_steps {
        let mut a: Vec<f64> = agent.act(&s)?.iter().zip(noise.sample()).map(|(m, e)| m + e).collect();
        clip_action(&mut a);
        let s_row = Array2::from_shape_vec((1, ns), s.clone()).expect("state row");
        let h = ctx.filter.hyperplanes(s_row.view())?.pop().flatten();
        let out = control_env_step(
            ctx.env,
            &s,
            &a,
            h.as_ref(),
            t,
            cfg.gamma,
            &mut env_transitions,
            &mut env_control,
            rng,
        )?;
        penalty_sum += out.penalty;
        t += 1;
        if out.failure {
            failures += 1;
            log::debug!("control failure at step {step} of iteration {iteration}");
        }
        if out.failure || out.truncated {
            episodes += 1;
            s = ctx.env.sample_initial(rng);
            t = 0;
            noise.reset();
        } else {
            s = out.s_next;
        }

        if cfg.rollouts > 0 && (step + 1) % cfg.rollout_every == 0 {
            let starts = (0..cfg.rollouts)
                .map(|_| env_control.get(rng.random_range(0..env_control.len())).map(|t| t.s).unwrap_or_default())
                .collect();
            control_model_rollouts(
                ctx.env,
                ctx.model,
                &ctx.gate,
                &agent,
                ctx.filter,
                starts,
                cfg,
                &mut model_control,
                rng,
            )?;
        }

        if env_control.len() >= cfg.warmup.max(1) && env_control.len() + model_control.len() >= cfg.batch_size {
            for _ in 0..cfg.updates_per_step {
                let batch = if model_control.is_empty() {
                    env_control.sample(cfg.batch_size, rng)?
                } else {
                    sample_union(&[&env_control, &model_control], cfg.batch_size, rng)?
                };
                let up = agent.update(&batch, 0.0, rng)?;
                if step % record_every == 0 && up.actor_objective.is_some() {
                    log.push(TrainingRecord {
                        phase: "control".into(),
                        iteration,
                        step: step + 1,
                        critic_loss: up.critic_loss,
                        actor_objective: up.actor_objective.unwrap_or(f64::NAN),
                        mean_u_norm: f64::NAN,
                        buffer_len: env_control.len(),
                        aux_buffer_len: model_control.len(),
                    });
                }
            }
        }
    }
    Ok(ControlOutcome {
        agent,
        env_transitions,
        env_control,
        model_control,
        failures,
        episodes,
        mean_penalty: if cfg.env_steps > 0 { penalty_sum / cfg.env_steps as f64 } else { 0.0 },
    })
}

/// Greedy filtered evaluation in the real environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ControlEvaluation {
    pub returns: Vec<f64>,
    pub failures: usize,
    pub mean_return: f64,
    /// Half-width of the 95% normal confidence interval of the mean.
    pub ci95: f64,
}

pub fn evaluate_control(
    env: &dyn Env,
    policy: &dyn Policy,
    filter: &dyn SafetyFilter,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<ControlEvaluation> {
    let ns = env.spec().state_dim;
    let mut eval = ControlEvaluation::default();
    for _ in 0..episodes {
        let mut s = env.sample_initial(rng);
        let mut ret = 0.0;
        for _ in 0..env.spec().max_episode_steps {
            let row = Array2::from_shape_vec((1, ns), s.clone()).expect("state row");
            let a = policy.act_batch(row.view())?.row(0).to_vec();
            let h = filter.hyperplanes(row.view())?.pop().flatten();
            let a_v = apply_filter(&a, h.as_ref())?;
            let next = env.step(&s, &a_v, rng);
            ret += env.reward(&s, &a_v, &next);
            if env.is_failure(&next) {
                eval.failures += 1;
                break;
            }
            s = next;
        }
        eval.returns.push(ret);
    }
    let n = eval.returns.len();
    if n > 0 {
        eval.mean_return = eval.returns.iter().sum::<f64>() / n as f64;
    }
    if n > 1 {
        let var = eval.returns.iter().map(|r| (r - eval.mean_return).powi(2)).sum::<f64>() / (n - 1) as f64;
        eval.ci95 = 1.96 * (var / n as f64).sqrt();
    }
    Ok(eval)
}
