//! A single learning run: environment, agent, snapshot store and graph.
//!
//! The session drives the trial loop one forward step at a time. In baseline
//! mode a failure restarts the trial; in timewarp mode it rewinds to a time
//! chosen by the rewind policy. Rewinding all the way to the trial start is
//! the same thing as restarting, so it is counted as a new trial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Successor};
use crate::discretizer::{discretize, DiscreteStateId};
use crate::env::{self, initial_state, Action, ContinuousState};
use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::metrics::{RunMetrics, Variant};
use crate::graph::TransitionGraph;
use crate::timewarp::{choose_rewind_target, RewindEvent, RewindPolicy, Snapshot, SnapshotStore};

#[derive(Debug, Clone, Copy, Default)]
pub struct SessionOptions {
    /// Keep snapshots even in baseline mode (manual rewinds).
    pub record_snapshots: bool,
    /// Restore the random stream from the snapshot on rewind. Test-only
    /// replay mode; normal runs keep the live stream.
    pub restore_rng_on_rewind: bool,
    /// Keep a per-step log of `(state, action, reward)`.
    pub log_steps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub trial: u64,
    pub state: ContinuousState,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FailureHandling {
    TrialReset,
    Rewound(RewindEvent),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub from: DiscreteStateId,
    pub action: Action,
    pub reward: f64,
    pub next: Successor,
    pub failure: Option<FailureHandling>,
}

pub struct Session {
    config: ExperimentConfig,
    variant: Variant,
    options: SessionOptions,
    budget: Option<u64>,
    epsilon_override: Option<f64>,
    agent: Agent,
    rng: ChaCha8Rng,
    state: ContinuousState,
    store: SnapshotStore,
    graph: TransitionGraph,
    history: Vec<(DiscreteStateId, Action)>,
    trial_events: Vec<RewindEvent>,
    events: Vec<RewindEvent>,
    step_log: Vec<StepRecord>,
    steps: u64,
    trials: u64,
    trial_has_steps: bool,
    rewinds: u64,
    best_trial_steps: u64,
    trial_best: u64,
    last_reward: f64,
    last_event: Option<RewindEvent>,
}

impl Session {
    /// `budget` drives the exploration decay; `None` keeps epsilon at its
    /// starting value.
    pub fn new(
        config: &ExperimentConfig,
        variant: Variant,
        seed: u64,
        budget: Option<u64>,
        options: SessionOptions,
    ) -> Result<Self> {
        Self::with_agent(config, variant, seed, budget, options, Agent::new(config.algorithm, config.agent))
    }

    /// Like [`Session::new`] but continues from an existing agent, which
    /// keeps its own learning parameters.
    pub fn with_agent(
        config: &ExperimentConfig,
        variant: Variant,
        seed: u64,
        budget: Option<u64>,
        options: SessionOptions,
        agent: Agent,
    ) -> Result<Self> {
        config.validate()?;
        agent.config.validate()?;
        let mut session = Self {
            config: config.clone(),
            variant,
            options,
            budget,
            epsilon_override: None,
            agent,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: initial_state(),
            store: SnapshotStore::new(config.snapshot_capacity)?,
            graph: TransitionGraph::new(),
            history: Vec::new(),
            trial_events: Vec::new(),
            events: Vec::new(),
            step_log: Vec::new(),
            steps: 0,
            trials: 0,
            trial_has_steps: false,
            rewinds: 0,
            best_trial_steps: 0,
            trial_best: 0,
            last_reward: 0.0,
            last_event: None,
        };
        session.start_trial();
        Ok(session)
    }

    fn keeps_snapshots(&self) -> bool {
        self.variant == Variant::Timewarp || self.options.record_snapshots
    }

    fn start_trial(&mut self) {
        self.state = initial_state();
        self.agent.reset_traces();
        self.history.clear();
        self.trial_events.clear();
        self.trial_has_steps = false;
        self.trial_best = 0;
        self.store.clear();
        if self.keeps_snapshots() {
            self.store
                .record(Snapshot::new(self.state, self.agent.traces.clone(), &self.rng))
                .expect("empty store accepts any snapshot");
        }
    }

    pub fn epsilon(&self) -> f64 {
        if let Some(eps) = self.epsilon_override {
            return eps;
        }
        match self.budget {
            Some(budget) if budget > 0 => self.config.agent.epsilon_at(self.steps as f64 / budget as f64),
            _ => self.config.agent.epsilon_at(0.0),
        }
    }

    /// Takes one forward step and handles a failure if it occurs.
    pub fn step(&mut self) -> Result<StepReport> {
        let config = &self.config;
        let from = discretize(&self.state, &config.bounds, &config.physics)?;
        let action = self.agent.select(from, self.epsilon(), &mut self.rng);
        let outcome = env::step(&self.state, action, &config.physics)?;
        let next = if outcome.failed {
            Successor::Failure
        } else {
            Successor::State(discretize(&outcome.next_state, &config.bounds, &config.physics)?)
        };

        self.graph.record_transition(from, next);
        self.agent.update(from, action, outcome.reward, next);
        self.history.push((from, action));
        if self.options.log_steps {
            self.step_log.push(StepRecord {
                trial: self.trials + u64::from(!self.trial_has_steps),
                state: self.state,
                action,
                reward: outcome.reward,
            });
        }
        if !self.trial_has_steps {
            self.trial_has_steps = true;
            self.trials += 1;
        }
        self.steps += 1;
        self.last_reward = outcome.reward;
        self.trial_best = self.trial_best.max(outcome.next_state.time_index);
        self.best_trial_steps = self.best_trial_steps.max(self.trial_best);

        let failure = if outcome.failed {
            Some(self.handle_failure(outcome.next_state.time_index)?)
        } else {
            self.state = outcome.next_state;
            if self.keeps_snapshots() {
                self.store.record(Snapshot::new(self.state, self.agent.traces.clone(), &self.rng))?;
            }
            None
        };
        Ok(StepReport { from, action, reward: outcome.reward, next, failure })
    }

    fn handle_failure(&mut self, failure_time: u64) -> Result<FailureHandling> {
        if self.variant == Variant::Baseline {
            self.start_trial();
            return Ok(FailureHandling::TrialReset);
        }
        let trial_start = self.store.earliest().map_or(0, |s| s.time_index);
        let choice = choose_rewind_target(
            &self.config.rewind_policy,
            trial_start,
            failure_time,
            &self.trial_events,
            &mut self.rng,
        );
        if choice.target_time <= trial_start {
            self.start_trial();
            return Ok(FailureHandling::TrialReset);
        }
        let event = self.restore(failure_time, choice.target_time, choice.escalation_level)?;
        Ok(FailureHandling::Rewound(event))
    }

    fn restore(&mut self, from_time: u64, target_time: u64, escalation_level: u32) -> Result<RewindEvent> {
        let (snap, event) = self.store.rewind(from_time, target_time, escalation_level)?;
        self.state = snap.state;
        if let Some(traces) = self.agent.traces.as_mut() {
            match snap.traces {
                Some(saved) => *traces = saved,
                None => traces.clear(),
            }
        }
        if self.options.restore_rng_on_rewind {
            self.rng = snap.rng_state.restore();
        }
        self.history.truncate(snap.time_index as usize);
        self.trial_events.push(event);
        self.events.push(event);
        self.rewinds += 1;
        self.last_event = Some(event);
        Ok(event)
    }

    /// Operator-driven rewind. Uses the same restore path as automatic
    /// failure handling and never touches learned values.
    pub fn rewind_to(&mut self, target_time: u64) -> Result<RewindEvent> {
        let now = self.state.time_index;
        if target_time >= now {
            return Err(Error::InvalidParam(format!(
                "rewind target {target_time} is not before the current time {now}"
            )));
        }
        if self.store.is_empty() {
            return Err(Error::EmptyStore);
        }
        self.restore(now, target_time, 0)
    }

    pub fn rewind_steps(&mut self, steps_back: u64) -> Result<RewindEvent> {
        if steps_back == 0 {
            return Err(Error::InvalidParam("steps_back must be at least 1".into()));
        }
        let target = self.state.time_index.checked_sub(steps_back).ok_or_else(|| {
            Error::InvalidParam(format!(
                "cannot go back {steps_back} steps from time {}",
                self.state.time_index
            ))
        })?;
        self.rewind_to(target)
    }

    /// Abandons the running trial and starts a fresh one.
    pub fn reset_trial(&mut self) {
        self.start_trial();
    }

    pub fn metrics(&self, budget: u64, seed: u64) -> RunMetrics {
        RunMetrics {
            budget,
            variant: self.variant,
            seed,
            best_trial_steps: self.best_trial_steps,
            benchmark_trial_steps: 0,
            unique_states: self.graph.unique_state_count() as u64,
            trial_count: self.trials,
            rewind_count: self.rewinds,
        }
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon_override = Some(epsilon);
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.config.agent.alpha = alpha;
        self.agent.config.alpha = alpha;
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        self.config.agent.temperature = temperature;
        self.agent.config.temperature = temperature;
    }

    pub fn set_rewind_policy(&mut self, policy: RewindPolicy) {
        self.config.rewind_policy = policy;
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }

    pub fn state(&self) -> &ContinuousState {
        &self.state
    }

    pub fn discrete_state(&self) -> Option<DiscreteStateId> {
        discretize(&self.state, &self.config.bounds, &self.config.physics).ok()
    }

    pub fn store(&self) -> &SnapshotStore {
        &self.store
    }

    pub fn graph(&self) -> &TransitionGraph {
        &self.graph
    }

    pub fn history(&self) -> &[(DiscreteStateId, Action)] {
        &self.history
    }

    pub fn events(&self) -> &[RewindEvent] {
        &self.events
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.step_log
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    /// 1-based number of the trial currently running (or about to start).
    pub fn current_trial(&self) -> u64 {
        self.trials + u64::from(!self.trial_has_steps)
    }

    pub fn rewinds(&self) -> u64 {
        self.rewinds
    }

    pub fn best_trial_steps(&self) -> u64 {
        self.best_trial_steps
    }

    pub fn last_reward(&self) -> f64 {
        self.last_reward
    }

    pub fn last_event(&self) -> Option<RewindEvent> {
        self.last_event
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Learner;
    use crate::timewarp::{RestoredFrom, RewindKind};

    fn config() -> ExperimentConfig {
        ExperimentConfig { seeds: vec![1], budgets: vec![1000], ..Default::default() }
    }

    fn run(session: &mut Session, steps: u64) {
        for _ in 0..steps {
            session.step().unwrap();
        }
    }

    #[test]
    fn baseline_resets_on_failure() {
        let mut s = Session::new(&config(), Variant::Baseline, 3, Some(2000), SessionOptions::default()).unwrap();
        let mut resets = 0;
        for _ in 0..2000 {
            let r = s.step().unwrap();
            if let Some(f) = r.failure {
                assert_eq!(f, FailureHandling::TrialReset);
                assert_eq!(s.state(), &initial_state());
                resets += 1;
            }
        }
        assert!(resets > 0);
        assert_eq!(s.rewinds(), 0);
        assert!(s.store().is_empty());
        assert_eq!(s.steps(), 2000);
    }

    #[test]
    fn timewarp_rewinds_keep_q_values() {
        let mut s = Session::new(&config(), Variant::Timewarp, 5, Some(5000), SessionOptions::default()).unwrap();
        let mut rewound = 0;
        for _ in 0..5000 {
            let before = match &s.agent().learner {
                Learner::QLearning(q) => q.clone(),
                _ => unreachable!(),
            };
            let report = s.step().unwrap();
            if let Some(FailureHandling::Rewound(event)) = report.failure {
                rewound += 1;
                assert!(event.target_time < event.failure_time);
                assert_eq!(s.state().time_index, event.restored_time);
                // the only change is this step's own update
                let Learner::QLearning(after) = &s.agent().learner else { unreachable!() };
                let mut expected = before.clone();
                crate::agent::q_update(
                    &mut expected,
                    report.from,
                    report.action,
                    report.reward,
                    report.next,
                    &s.config().agent,
                    None,
                );
                assert_eq!(after, &expected);
            }
        }
        assert!(rewound > 0);
        assert_eq!(s.rewinds(), rewound);
    }

    #[test]
    fn manual_rewind_by_steps() {
        let mut c = config();
        // a steady policy so the first trial lasts long enough
        c.agent.epsilon = 0.0;
        c.agent.epsilon_final = 0.0;
        let options = SessionOptions { record_snapshots: true, ..Default::default() };
        let mut s = Session::new(&c, Variant::Baseline, 1, None, options).unwrap();
        while s.state().time_index < 6 {
            s.step().unwrap();
        }
        let now = s.state().time_index;
        let event = s.rewind_steps(5).unwrap();
        assert_eq!(s.state().time_index, now - 5);
        assert_eq!(event.restored_from, RestoredFrom::Exact);
        assert_eq!(s.history().len() as u64, now - 5);
        assert!(s.rewind_steps(100).is_err());
        assert!(s.rewind_to(s.state().time_index).is_err());
    }

    #[test]
    fn full_reset_rewind_counts_trials() {
        let mut c = config();
        c.rewind_policy = RewindPolicy { kind: RewindKind::FullReset, escalation: false };
        let mut tw = Session::new(&c, Variant::Timewarp, 9, Some(3000), SessionOptions::default()).unwrap();
        let mut base = Session::new(&c, Variant::Baseline, 9, Some(3000), SessionOptions::default()).unwrap();
        run(&mut tw, 3000);
        run(&mut base, 3000);
        assert_eq!(tw.metrics(3000, 9), RunMetrics { variant: Variant::Timewarp, ..base.metrics(3000, 9) });
        assert_eq!(tw.rewinds(), 0);
    }

    #[test]
    fn epsilon_schedule_and_override() {
        let mut c = config();
        c.agent.epsilon = 0.1;
        c.agent.epsilon_final = 0.01;
        let mut s = Session::new(&c, Variant::Baseline, 1, Some(100), SessionOptions::default()).unwrap();
        assert_eq!(s.epsilon(), 0.1);
        run(&mut s, 50);
        assert!((s.epsilon() - 0.055).abs() < 1e-12);
        s.set_epsilon(0.3);
        assert_eq!(s.epsilon(), 0.3);
        let s = Session::new(&c, Variant::Baseline, 1, None, SessionOptions::default()).unwrap();
        assert_eq!(s.epsilon(), 0.1);
    }
}
