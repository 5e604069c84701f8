//! The outer loop: model learning, filter learning on model rollouts, and
//! filtered control learning in the real environment.

mod control_phase;
mod filter_phase;
mod policy;
mod shaping;

use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use control_phase::{
    control_agent_config, control_env_step, control_model_rollouts, evaluate_control, train_control_policy,
    ControlContext, ControlEvaluation, ControlOutcome, ControlStep,
};
pub use filter_phase::{
    evaluate_filter, filter_agent_config, filter_passes, mean_restrictiveness, FilterContext, FilterEvaluation,
    FilterRoundStats, FilterTrainer, RolloutGate, StepEnd,
};
pub use policy::{
    apply_filter, decode_hyperplane, filter_penalty, restrictiveness, ConstantPolicy, FixedHyperplane,
    LearnedFilter, PassThrough, Policy, SafetyFilter,
};
pub use shaping::{
    admits_high_return, initial_states, return_threshold, BehaviorBranch, BehaviorPolicyMixture, MtfConfig,
    StartSource, StartStateMixture, TrajectoryStore,
};

use crate::config::RunConfig;
use crate::env::{default_prior_controller, generate_prior_data, Env, PriorDataConfig, SimRng, Transition};
use crate::error::{Error, Result};
use crate::model::{calibrate_from_entropies, entropies_of, train_ensemble, CertainSetThresholds, EnsembleModel, TrainReport};
use crate::rl::{ActionHead, AgentBundle};

/// One row of the training stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub phase: String,
    pub iteration: usize,
    pub step: usize,
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub mean_u_norm: f64,
    pub buffer_len: usize,
    pub aux_buffer_len: usize,
}

/// Summary of one completed iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps_cum: usize,
    pub eval_return_mean: f64,
    pub eval_return_ci: f64,
    /// Failures during real control-phase data collection.
    pub failures_cum: usize,
    /// Failures during greedy evaluation episodes.
    pub eval_failures_cum: usize,
    pub filter_mean_len: f64,
    pub filter_rounds: usize,
    pub filter_passed: bool,
    pub mean_u_norm: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub model_holdout_nll: f64,
    pub model_data_len: usize,
    pub control_failures: usize,
    pub mean_penalty: f64,
    pub failed_store_len: usize,
    pub high_store_len: usize,
    pub wall_seconds: f64,
}

/// Outcome of the filter phase of one iteration.
#[derive(Clone, Debug)]
pub struct FilterPhaseReport {
    pub agent: AgentBundle,
    pub passed: bool,
    pub rounds: usize,
    pub evaluations: Vec<FilterEvaluation>,
}

impl FilterPhaseReport {
    pub fn last(&self) -> Option<&FilterEvaluation> {
        self.evaluations.last()
    }
}

/// Everything that carries over from one iteration to the next.
#[derive(Clone, Debug)]
pub struct IterationState {
    /// Number of completed iterations.
    pub j: usize,
    pub model: Option<EnsembleModel>,
    pub filter_agent: Option<AgentBundle>,
    pub control_agent: Option<AgentBundle>,
    /// All real transitions with executed actions; only ever grows.
    pub model_data: Vec<Transition>,
    /// Episode-initial states of the prior data.
    pub rho0: Vec<Vec<f64>>,
    pub failed: TrajectoryStore,
    pub high: TrajectoryStore,
    pub failures_cum: usize,
    pub eval_failures_cum: usize,
    pub env_steps_cum: usize,
    pub history: Vec<IterationMetrics>,
    pub training_log: Vec<TrainingRecord>,
}

impl IterationState {
    pub fn from_prior(prior: Vec<Transition>, store_capacity: usize) -> Self {
        Self {
            j: 0,
            model: None,
            filter_agent: None,
            control_agent: None,
            rho0: initial_states(&prior),
            model_data: prior,
            failed: TrajectoryStore::new(store_capacity),
            high: TrajectoryStore::new(store_capacity),
            failures_cum: 0,
            eval_failures_cum: 0,
            env_steps_cum: 0,
            history: Vec::new(),
            training_log: Vec::new(),
        }
    }
}

/// Stage of an iteration that draws its own random stream.
pub const STAGE_MODEL: u64 = 0;
pub const STAGE_FILTER: u64 = 1;
pub const STAGE_CONTROL: u64 = 2;
pub const STAGE_EVAL: u64 = 3;

/// Generator for one stage of iteration `j`; independent of how the run
/// was interrupted and resumed.
pub fn stage_rng(seed: u64, j: usize, stage: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(((j as u64 + 1) << 8) | stage);
    rng
}

pub struct Orchestrator {
    pub config: RunConfig,
    pub env: Box<dyn Env>,
    pub state: IterationState,
}

impl Orchestrator {
    /// Validate `config` and collect the prior data.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env.make(config.episode_steps);
        let controller = default_prior_controller(config.env, env.as_ref())?;
        let prior = generate_prior_data(
            env.as_ref(),
            &controller,
            &PriorDataConfig {
                n_steps: config.prior.steps,
                noise_sigma: config.prior.noise_sigma,
                seed: config.seed,
            },
        );
        if prior.is_empty() {
            return Err(Error::Config("prior data is empty".into()));
        }
        let state = IterationState::from_prior(prior, config.filter.store_capacity);
        Ok(Self { config, env, state })
    }

    /// Resume from a previously saved state.
    pub fn from_state(config: RunConfig, state: IterationState) -> Result<Self> {
        config.validate()?;
        let env = config.env.make(config.episode_steps);
        Ok(Self { config, env, state })
    }

    pub fn stage_rng(&self, j: usize, stage: u64) -> SimRng {
        stage_rng(self.config.seed, j, stage)
    }

    pub fn filter_head(&self) -> ActionHead {
        if self.config.ablation.raw_hyperplane {
            ActionHead::Raw
        } else {
            ActionHead::Ball
        }
    }

    /// Fit a fresh ensemble on all real data and calibrate its thresholds
    /// with the filter quantiles.
    pub fn train_model(&self, rng: &mut SimRng) -> Result<(EnsembleModel, TrainReport)> {
        let (mut model, report) = train_ensemble(&self.state.model_data, &self.config.model, rng)?;
        let f = &self.config.filter;
        crate::model::calibrate_thresholds(&mut model, &self.state.model_data, f.zeta1, f.zeta2, self.config.episode_steps)?;
        Ok((model, report))
    }

    /// Thresholds from the control quantiles.
    pub fn control_thresholds(&self, model: &EnsembleModel) -> Result<CertainSetThresholds> {
        let c = &self.config.control;
        let ent = entropies_of(model, &self.state.model_data)?;
        calibrate_from_entropies(&ent, c.zeta1, c.zeta2, self.config.episode_steps)
    }

    /// Train the filter in rounds until it passes or the round limit is hit.
    /// Never aborts on a failing filter; see [`Orchestrator::run_iteration`].
    pub fn filter_phase(
        &mut self,
        model: &EnsembleModel,
        iteration: usize,
        rng: &mut SimRng,
    ) -> Result<FilterPhaseReport> {
        let cfg = self.config.filter.clone();
        let spec = self.env.spec().clone();
        let head = self.filter_head();
        let thresholds = model
            .thresholds
            .ok_or_else(|| Error::Training("model thresholds are not calibrated".into()))?;
        let gate = RolloutGate {
            thresholds,
            horizon: self.config.episode_steps,
        };
        let st = &mut self.state;
        let prev = st.control_agent.as_ref().map(|a| a as &dyn Policy);
        let ctx = FilterContext {
            env: self.env.as_ref(),
            model,
            gate,
            prev_policy: prev,
            rho0: &st.rho0,
        };
        let mut trainer = FilterTrainer::new(&cfg, spec.state_dim, spec.action_dim, head, rng)?;
        let mut evaluations: Vec<FilterEvaluation> = Vec::new();
        let mut best: Option<f64> = None;
        let mut passed = false;
        for round in 0..cfg.max_rounds {
            let stats = trainer.train_round(&ctx, &st.failed, &st.high, cfg.steps_per_round, iteration, &mut st.training_log, rng)?;
            let eval = evaluate_filter(&trainer.agent, &ctx, &cfg, cfg.eval_rollouts, &mut st.failed, &mut st.high, rng)?;
            log::info!(
                "iteration {iteration} filter round {}: episodes {} updates {} critic loss {:.4} mean len {:.1} ‖u‖ {:.3} T_F {} T_G {}",
                round + 1,
                stats.episodes,
                stats.updates,
                stats.critic_loss,
                eval.mean_len,
                eval.mean_u_norm,
                st.failed.len(),
                st.high.len()
            );
            passed = filter_passes(eval.mean_len, best, &cfg, self.config.episode_steps);
            best = Some(best.map_or(eval.mean_len, |b| b.max(eval.mean_len)));
            evaluations.push(eval);
            if passed {
                break;
            }
        }
        Ok(FilterPhaseReport {
            agent: trainer.agent,
            passed,
            rounds: evaluations.len(),
            evaluations,
        })
    }

    /// One full iteration; aborts if the filter never passes its evaluation.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let start = Instant::now();
        let j = self.state.j + 1;
        let mut rng = self.stage_rng(j, STAGE_MODEL);
        let (model, report) = self.train_model(&mut rng)?;
        let thresholds = model.thresholds.expect("calibrated");
        log::info!(
            "iteration {j} model: {} epochs, holdout nll {:.4}, λ0 {:.3} λ1 {:.3} λ2 {:.3}",
            report.epochs,
            report.best_holdout_nll(),
            thresholds.lambda0,
            thresholds.lambda1,
            thresholds.lambda2
        );

        let mut rng = self.stage_rng(j, STAGE_FILTER);
        let (filter_report, filter_mean_len, mean_u_norm) = if self.config.ablation.disable_filter {
            (None, f64::NAN, 0.0)
        } else {
            let rep = self.filter_phase(&model, j, &mut rng)?;
            if !rep.passed {
                return Err(Error::Aborted(format!(
                    "filter failed its evaluation after {} rounds in iteration {j} (mean length {:.1} of {})",
                    rep.rounds,
                    rep.last().map_or(0.0, |e| e.mean_len),
                    self.config.episode_steps
                )));
            }
            let last = rep.last().cloned().unwrap_or_default();
            (Some(rep), last.mean_len, last.mean_u_norm)
        };

        let mut rng = self.stage_rng(j, STAGE_CONTROL);
        let control_gate = RolloutGate {
            thresholds: self.control_thresholds(&model)?,
            horizon: self.config.control.rollout_horizon,
        };
        let learned;
        let filter: &dyn SafetyFilter = match &filter_report {
            Some(rep) => {
                learned = LearnedFilter(&rep.agent);
                &learned
            }
            None => &PassThrough,
        };
        let ctx = ControlContext {
            env: self.env.as_ref(),
            model: &model,
            gate: control_gate,
            filter,
        };
        let outcome = train_control_policy(&ctx, &self.config.control, j, &mut self.state.training_log, &mut rng)?;
        let mut rng = self.stage_rng(j, STAGE_EVAL);
        let eval = evaluate_control(self.env.as_ref(), &outcome.agent, filter, self.config.control.eval_episodes, &mut rng)?;

        let st = &mut self.state;
        st.failures_cum += outcome.failures;
        st.eval_failures_cum += eval.failures;
        st.env_steps_cum += self.config.control.env_steps;
        st.model_data.extend(outcome.env_transitions);
        let metrics = IterationMetrics {
            iteration: j,
            env_steps_cum: st.env_steps_cum,
            eval_return_mean: eval.mean_return,
            eval_return_ci: eval.ci95,
            failures_cum: st.failures_cum,
            eval_failures_cum: st.eval_failures_cum,
            filter_mean_len,
            filter_rounds: filter_report.as_ref().map_or(0, |r| r.rounds),
            filter_passed: filter_report.is_some(),
            mean_u_norm,
            lambda0: thresholds.lambda0,
            lambda1: thresholds.lambda1,
            lambda2: thresholds.lambda2,
            model_holdout_nll: report.best_holdout_nll(),
            model_data_len: st.model_data.len(),
            control_failures: outcome.failures,
            mean_penalty: outcome.mean_penalty,
            failed_store_len: st.failed.len(),
            high_store_len: st.high.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {j} done in {:.0}s: return {:.2} ± {:.2}, failures {} (eval {})",
            metrics.wall_seconds,
            metrics.eval_return_mean,
            metrics.eval_return_ci,
            metrics.failures_cum,
            metrics.eval_failures_cum
        );
        st.model = Some(model);
        st.filter_agent = filter_report.map(|r| r.agent);
        st.control_agent = Some(outcome.agent);
        st.history.push(metrics.clone());
        st.j = j;
        Ok(metrics)
    }

    /// Run the remaining configured iterations, calling `on_iteration` after
    /// each one (for checkpointing and metrics).
    pub fn run<F>(&mut self, mut on_iteration: F) -> Result<()>
    where
        F: FnMut(&Orchestrator, &IterationMetrics) -> Result<()>,
    {
        while self.state.j < self.config.iterations {
            let m = self.run_iteration()?;
            on_iteration(self, &m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::env::EnvId;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::new(EnvId::SlopeCar, Profile::Desk);
        cfg.iterations = 0;
        cfg.prior.steps = 600;
        cfg
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let mut orch = Orchestrator::new(tiny_config()).unwrap();
        let before = orch.state.model_data.clone();
        let mut calls = 0;
        orch.run(|_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(orch.state.j, 0);
        assert_eq!(orch.state.model_data, before);
        assert!(orch.state.history.is_empty());
        assert!(!orch.state.rho0.is_empty());
    }

    #[test]
    fn stage_generators_are_distinct_and_reproducible() {
        use rand::Rng;
        let orch = Orchestrator::new(tiny_config()).unwrap();
        let a: u64 = orch.stage_rng(1, 0).random();
        let b: u64 = orch.stage_rng(1, 1).random();
        let c: u64 = orch.stage_rng(2, 0).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, orch.stage_rng(1, 0).random::<u64>());
    }

    #[test]
    fn prior_data_is_deterministic_in_the_seed() {
        let a = Orchestrator::new(tiny_config()).unwrap();
        let b = Orchestrator::new(tiny_config()).unwrap();
        assert_eq!(a.state.model_data, b.state.model_data);
        let mut cfg = tiny_config();
        cfg.seed += 1;
        let c = Orchestrator::new(cfg).unwrap();
        assert_ne!(a.state.model_data, c.state.model_data);
    }
}
