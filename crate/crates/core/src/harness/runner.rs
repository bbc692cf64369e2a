use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bandit::{
    arm_estimates, select_boltzmann, select_contextual_mab, select_human_then_learner, ArmEstimate,
    ControllerCostStats, SelectionPolicy,
};
use crate::ccbp::{CcbpPredictor, StateVector};
use crate::controller::ControllerId;
use crate::ddpg::{DdpgAgent, Transition};
use crate::env::{Env, GapGeometry, Termination};
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, StreamRng};

use super::config::RunConfig;
use super::log::{EpisodeLog, EvalLog};

/// A fixed set of initial states visited in freshly shuffled passes.
#[derive(Debug, Clone)]
pub struct InitialStatePool {
    states: Vec<Vec<f64>>,
    order: Vec<usize>,
    cursor: usize,
    rng: StreamRng,
}

impl InitialStatePool {
    pub fn new(env: &Env, size: usize, streams: &SeedStreams) -> Self {
        let mut draw = streams.stream("initial_states");
        let states = (0..size).map(|_| env.sample_initial(&mut draw)).collect();
        Self {
            states,
            order: Vec::new(),
            cursor: 0,
            rng: streams.stream("episode_order"),
        }
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn next_state(&mut self) -> Vec<f64> {
        if self.cursor == self.order.len() {
            self.order = (0..self.states.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        self.states[i].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStart {
    pub episode: u64,
    pub controller: ControllerId,
    pub initial_state: Vec<f64>,
    pub estimates: Vec<ArmEstimate>,
    pub budget_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: u64,
    /// 1-based index of the step just taken.
    pub step: u32,
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone)]
struct ActiveEpisode {
    start: EpisodeStart,
    states: Vec<StateVector>,
    learner_episodes: u64,
    teleop_fallback: bool,
}

/// Read-only view of the run for status displays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerStatus {
    pub next_episode: u64,
    pub episodes_total: u64,
    pub cumulative_cost: f64,
    pub demos_used: u64,
    pub learner_episodes: u64,
    pub in_episode: bool,
    pub controller: Option<ControllerId>,
    pub step: u32,
    pub estimates: Vec<ArmEstimate>,
    pub observation: Vec<f64>,
    pub geometry: Option<GapGeometry>,
}

/// The per-episode framework loop, exposed one environment step at a time.
///
/// `begin_episode` selects a controller for the next initial state;
/// `next_action` proposes the controller's action (scripted human, noisy
/// baseline or exploring learner); `apply_action` steps the environment,
/// feeds the replay buffers, trains, and on termination records the outcome
/// and returns the episode log.
pub struct Runner {
    config: RunConfig,
    env: Env,
    agent: DdpgAgent,
    predictor: CcbpPredictor,
    cost_stats: ControllerCostStats,
    pool: InitialStatePool,
    boltzmann_rng: StreamRng,
    baseline_rng: StreamRng,
    eval_rng: StreamRng,
    next_episode: u64,
    cumulative_cost: f64,
    demos_used: u64,
    train_enabled: bool,
    active: Option<ActiveEpisode>,
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let streams = SeedStreams::new(config.seed);
        let env = Env::new(&config.env)?;
        let agent = DdpgAgent::new(env.state_dim(), env.action_bounds(), config.ddpg.clone(), &streams)?;
        let predictor = CcbpPredictor::new(config.ccbp.settings()?)?;
        let roster = config.method.controllers();
        let cost_stats =
            ControllerCostStats::with_prior_fallback(&roster, config.ccbp.window, config.ccbp.prior_mean, &config.costs);
        let pool = InitialStatePool::new(&env, config.initial_state_pool, &streams);
        // Training cannot influence a run whose policy never selects the learner.
        let train_enabled = config.train && config.method.uses(ControllerId::Learner);
        Ok(Self {
            boltzmann_rng: streams.stream("boltzmann"),
            baseline_rng: streams.stream("baseline_noise"),
            eval_rng: streams.stream("evaluation"),
            env,
            agent,
            predictor,
            cost_stats,
            pool,
            next_episode: 0,
            cumulative_cost: 0.0,
            demos_used: 0,
            train_enabled,
            active: None,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn agent(&self) -> &DdpgAgent {
        &self.agent
    }

    pub fn predictor(&self) -> &CcbpPredictor {
        &self.predictor
    }

    pub fn pool(&self) -> &InitialStatePool {
        &self.pool
    }

    pub fn cumulative_cost(&self) -> f64 {
        self.cumulative_cost
    }

    pub fn next_episode(&self) -> u64 {
        self.next_episode
    }

    pub fn is_finished(&self) -> bool {
        self.active.is_none() && self.next_episode >= self.config.episodes
    }

    pub fn in_episode(&self) -> bool {
        self.active.is_some()
    }

    pub fn current(&self) -> Option<&EpisodeStart> {
        self.active.as_ref().map(|a| &a.start)
    }

    pub fn current_controller(&self) -> Option<ControllerId> {
        self.current().map(|s| s.controller)
    }

    pub fn status(&self) -> RunnerStatus {
        RunnerStatus {
            next_episode: self.next_episode,
            episodes_total: self.config.episodes,
            cumulative_cost: self.cumulative_cost,
            demos_used: self.demos_used,
            learner_episodes: self.agent.learner_episodes(),
            in_episode: self.active.is_some(),
            controller: self.current_controller(),
            step: if self.active.is_some() { self.env.steps() } else { 0 },
            estimates: self.active.as_ref().map(|a| a.start.estimates.clone()).unwrap_or_default(),
            observation: self.env.observation().values().to_vec(),
            geometry: self.env.geometry(),
        }
    }

    fn select(&mut self, s0: &StateVector, k: u64) -> Result<(ControllerId, Vec<ArmEstimate>)> {
        let now = k as i64 - 1;
        let costs = self.config.costs;
        let method = self.config.method.clone();
        let estimates = arm_estimates(s0, &self.predictor, method.alpha(), &costs, &ControllerId::ALL, now)?;
        let controller = match &method {
            SelectionPolicy::ContextualMab { alpha, controllers } => {
                select_contextual_mab(s0, &self.predictor, *alpha, &costs, controllers, now)?.controller
            }
            SelectionPolicy::Boltzmann { delta_tau, .. } => {
                let tau = k as f64 * delta_tau;
                select_boltzmann(&self.cost_stats, tau, &costs, now, &mut self.boltzmann_rng)?
            }
            SelectionPolicy::HumanThenLearner { n_h } => select_human_then_learner(*n_h, k)?,
            SelectionPolicy::FixedController { controller } => *controller,
        };
        Ok((controller, estimates))
    }

    pub fn begin_episode(&mut self) -> Result<EpisodeStart> {
        if self.active.is_some() {
            return Err(Error::contract("an episode is already in progress"));
        }
        if self.next_episode >= self.config.episodes {
            return Err(Error::contract("run already completed every episode"));
        }
        let k = self.next_episode;
        let init = self.pool.next_state();
        let s0 = self.env.reset_to(&init)?;
        let (mut controller, estimates) = self.select(&s0, k)?;
        let mut budget_override = false;
        if controller == ControllerId::Human {
            match self.config.demo_budget {
                Some(budget) if self.demos_used >= budget => {
                    controller = ControllerId::Learner;
                    budget_override = true;
                }
                _ => self.demos_used += 1,
            }
        }
        self.agent.begin_episode();
        let start = EpisodeStart {
            episode: k,
            controller,
            initial_state: init,
            estimates,
            budget_override,
        };
        self.active = Some(ActiveEpisode {
            start: start.clone(),
            states: vec![s0],
            learner_episodes: self.agent.learner_episodes(),
            teleop_fallback: false,
        });
        Ok(start)
    }

    /// The active controller's own action for the current state.
    pub fn next_action(&mut self) -> Result<Vec<f64>> {
        let controller = self
            .current_controller()
            .ok_or_else(|| Error::contract("no episode in progress"))?;
        match controller {
            ControllerId::Human => Ok(self.env.scripted_human()),
            ControllerId::Baseline => Ok(self.env.scripted_baseline(&mut self.baseline_rng)),
            ControllerId::Learner => {
                let obs = self.env.observation();
                self.agent.act(&obs, true)
            }
        }
    }

    /// Flags the current episode as finished by the scripted human after a
    /// live operator timed out.
    pub fn mark_teleop_fallback(&mut self) -> Result<()> {
        let active = self.active.as_mut().ok_or_else(|| Error::contract("no episode in progress"))?;
        if active.start.controller != ControllerId::Human {
            return Err(Error::contract("fallback only applies to human episodes"));
        }
        active.teleop_fallback = true;
        Ok(())
    }

    pub fn apply_action(&mut self, action: &[f64]) -> Result<(StepRecord, Option<EpisodeLog>)> {
        let Some(active) = self.active.as_mut() else {
            return Err(Error::contract("no episode in progress"));
        };
        let action = self.env.clip(action)?;
        let state = active.states.last().expect("episode has an initial state").clone();
        let result = self.env.step(&action)?;
        let controller = active.start.controller;
        active.states.push(result.observation.clone());
        if self.train_enabled {
            self.agent.add_experience(
                Transition {
                    state,
                    action: action.clone(),
                    reward: result.reward,
                    next_state: result.observation.clone(),
                    terminal: result.is_terminal(),
                },
                controller,
            )?;
            self.agent.train_step()?;
        }
        let record = StepRecord {
            episode: active.start.episode,
            step: self.env.steps(),
            observation: result.observation.values().to_vec(),
            action,
            reward: result.reward,
            termination: result.termination,
        };
        let log = match result.termination {
            Some(t) => Some(self.finish(t)?),
            None => None,
        };
        Ok((record, log))
    }

    fn finish(&mut self, termination: Termination) -> Result<EpisodeLog> {
        let active = self.active.take().expect("finish called inside an episode");
        let k = active.start.episode;
        let controller = active.start.controller;
        let success = termination == Termination::Goal;
        let cost = self.config.costs.episode_cost(controller, success);
        self.predictor.record_episode(&active.states, success, controller, k)?;
        self.cost_stats.record(controller, k, cost);
        let demos_added = self.agent.finish_episode(controller, success);
        self.cumulative_cost += cost;
        self.next_episode += 1;
        Ok(EpisodeLog {
            episode: k,
            initial_state: active.start.initial_state,
            controller,
            estimates: active.start.estimates,
            success,
            termination,
            steps: self.env.steps(),
            human_cost: cost,
            cumulative_cost: self.cumulative_cost,
            learner_episodes: active.learner_episodes,
            budget_override: active.start.budget_override,
            teleop_fallback: active.teleop_fallback,
            demos_added,
            train_steps: self.agent.train_steps(),
        })
    }

    pub fn step(&mut self) -> Result<(StepRecord, Option<EpisodeLog>)> {
        let action = self.next_action()?;
        self.apply_action(&action)
    }

    pub fn run_episode(&mut self) -> Result<EpisodeLog> {
        if self.active.is_none() {
            self.begin_episode()?;
        }
        loop {
            if let (_, Some(log)) = self.step()? {
                return Ok(log);
            }
        }
    }

    /// Deterministic learner rollout from `init` that touches neither the
    /// buffers nor the outcome store. Returns visited states and success.
    pub fn rollout_learner(&mut self, init: &[f64]) -> Result<(Vec<StateVector>, bool, u32)> {
        if self.active.is_some() {
            return Err(Error::contract("cannot evaluate during a training episode"));
        }
        let mut states = vec![self.env.reset_to(init)?];
        loop {
            let a = self.agent.act(states.last().unwrap(), false)?;
            let r = self.env.step(&a)?;
            states.push(r.observation.clone());
            if let Some(success) = r.outcome() {
                return Ok((states, success, self.env.steps()));
            }
        }
    }

    pub fn sample_evaluation_state(&mut self) -> Vec<f64> {
        self.env.sample_initial(&mut self.eval_rng)
    }

    /// One noise-free learner episode from a fresh initial state.
    pub fn run_evaluation_episode(&mut self, after_episode: u64) -> Result<EvalLog> {
        let init = self.sample_evaluation_state();
        let (_, success, steps) = self.rollout_learner(&init)?;
        Ok(EvalLog {
            after_episode,
            initial_state: init,
            success,
            steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::SelectionPolicy;
    use crate::env::EnvConfig;

    fn cfg(method: SelectionPolicy, episodes: u64) -> RunConfig {
        let mut c = RunConfig::new(EnvConfig::default(), method);
        c.episodes = episodes;
        c.seed = 3;
        c
    }

    #[test]
    fn pool_visits_every_state_once_per_pass() {
        let env = Env::new(&EnvConfig::default()).unwrap();
        let mut pool = InitialStatePool::new(&env, 10, &SeedStreams::new(1));
        let mut seen: Vec<Vec<f64>> = (0..10).map(|_| pool.next_state()).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut all = pool.states().to_vec();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, all);
    }

    #[test]
    fn human_episode_costs_demo_cost() {
        let mut r = Runner::new(cfg(SelectionPolicy::FixedController { controller: ControllerId::Human }, 3)).unwrap();
        for i in 0..3 {
            let log = r.run_episode().unwrap();
            assert!(log.success);
            assert_eq!(log.human_cost, 1.0);
            assert_eq!(log.cumulative_cost, (i + 1) as f64);
            assert_eq!(log.estimates.len(), 3);
        }
        assert!(r.is_finished());
        assert!(r.begin_episode().is_err());
    }

    #[test]
    fn baseline_cost_identity() {
        let mut r = Runner::new(cfg(SelectionPolicy::FixedController { controller: ControllerId::Baseline }, 40)).unwrap();
        let mut failures = 0;
        for _ in 0..40 {
            let log = r.run_episode().unwrap();
            assert_eq!(log.human_cost, if log.success { 0.0 } else { 5.0 });
            failures += (!log.success) as u32;
        }
        assert_eq!(r.cumulative_cost(), 5.0 * failures as f64);
        // the baseline-only policy never trains the learner
        assert_eq!(r.agent().replay().len(), 0);
    }

    #[test]
    fn demo_budget_overrides_to_learner() {
        let mut c = cfg(SelectionPolicy::FixedController { controller: ControllerId::Human }, 4);
        c.demo_budget = Some(2);
        c.method = SelectionPolicy::HumanThenLearner { n_h: 4 };
        let mut r = Runner::new(c).unwrap();
        let logs: Vec<EpisodeLog> = (0..4).map(|_| r.run_episode().unwrap()).collect();
        let who: Vec<ControllerId> = logs.iter().map(|l| l.controller).collect();
        assert_eq!(who, vec![ControllerId::Human, ControllerId::Human, ControllerId::Learner, ControllerId::Learner]);
        assert!(logs[2].budget_override && !logs[1].budget_override);
    }

    #[test]
    fn evaluation_leaves_cost_and_buffers_alone() {
        let mut r = Runner::new(cfg(SelectionPolicy::HumanThenLearner { n_h: 2 }, 4)).unwrap();
        r.run_episode().unwrap();
        let (cost, replay, obs) = (r.cumulative_cost(), r.agent().replay().len(), r.predictor().observations().len());
        r.run_evaluation_episode(0).unwrap();
        assert_eq!(r.cumulative_cost(), cost);
        assert_eq!(r.agent().replay().len(), replay);
        assert_eq!(r.predictor().observations().len(), obs);
    }

    #[test]
    fn step_contract() {
        let mut r = Runner::new(cfg(SelectionPolicy::FixedController { controller: ControllerId::Learner }, 2)).unwrap();
        assert!(r.next_action().is_err());
        assert!(r.apply_action(&[0.0, 0.0]).is_err());
        r.begin_episode().unwrap();
        assert!(r.begin_episode().is_err());
        assert!(r.mark_teleop_fallback().is_err());
        let (rec, _) = r.step().unwrap();
        assert_eq!(rec.step, 1);
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let run = || {
            let mut r = Runner::new(cfg(SelectionPolicy::ContextualMab { alpha: 1.0, controllers: vec![ControllerId::Human, ControllerId::Learner] }, 8)).unwrap();
            (0..8).map(|_| r.run_episode().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
