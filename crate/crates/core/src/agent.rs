//! Tabular learners: Q-learning and a TD actor-critic, both with optional
//! accumulating eligibility traces.
//!
//! Learners only ever see `(s, a, r, s')` tuples. Whether the simulation was
//! rewound between two calls is invisible here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretizer::{DiscreteStateId, NUM_STATES};
use crate::env::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    #[default]
    Constant,
    /// `alpha / n(s, a)` where `n` counts updates of the pair.
    InverseVisits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    EpsilonGreedy,
    Boltzmann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub alpha: f64,
    pub alpha_schedule: AlphaSchedule,
    /// Actor step size for actor-critic. The critic uses `alpha`.
    pub actor_alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Epsilon decays linearly to this value over the training budget.
    /// Set it equal to `epsilon` for a constant rate.
    pub epsilon_final: f64,
    pub selection: Selection,
    pub temperature: f64,
    pub traces_enabled: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            alpha_schedule: AlphaSchedule::Constant,
            actor_alpha: 0.5,
            gamma: 0.95,
            lambda: 0.8,
            epsilon: 0.05,
            epsilon_final: 0.0,
            selection: Selection::EpsilonGreedy,
            temperature: 0.1,
            traces_enabled: false,
        }
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("agent.{name} must lie in [0, 1], got {v}")))
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        in_unit("alpha", self.alpha)?;
        in_unit("actor_alpha", self.actor_alpha)?;
        in_unit("epsilon", self.epsilon)?;
        in_unit("epsilon_final", self.epsilon_final)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("agent.gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("agent.lambda must lie in [0, 1), got {}", self.lambda)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "agent.temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn trace_decay(&self) -> f64 {
        self.lambda * self.gamma
    }

    /// Exploration rate after `progress` (in `[0, 1]`) of the budget.
    pub fn epsilon_at(&self, progress: f64) -> f64 {
        self.epsilon + (self.epsilon_final - self.epsilon) * progress.clamp(0.0, 1.0)
    }

    fn rate(&self, base: f64, visits: u32) -> f64 {
        match self.alpha_schedule {
            AlphaSchedule::Constant => base,
            AlphaSchedule::InverseVisits => base / f64::from(visits.max(1)),
        }
    }
}

/// Where a transition ended: a cell, or the absorbing failure outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Successor {
    State(DiscreteStateId),
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<[f64; 2]>,
    #[serde(default = "zero_visits")]
    pub visits: Vec<[u32; 2]>,
}

fn zero_visits() -> Vec<[u32; 2]> {
    vec![[0; 2]; NUM_STATES]
}

impl Default for QTable {
    fn default() -> Self {
        Self { values: vec![[0.0; 2]; NUM_STATES], visits: zero_visits() }
    }
}

impl QTable {
    pub fn get(&self, s: DiscreteStateId, a: Action) -> f64 {
        self.values[s.index()][a.index()]
    }

    pub fn set(&mut self, s: DiscreteStateId, a: Action, value: f64) {
        self.values[s.index()][a.index()] = value;
    }

    pub fn row(&self, s: DiscreteStateId) -> [f64; 2] {
        self.values[s.index()]
    }

    fn max_next(&self, next: Successor) -> f64 {
        match next {
            Successor::State(id) => {
                let [l, r] = self.row(id);
                l.max(r)
            }
            Successor::Failure => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCriticTables {
    pub critic_values: Vec<f64>,
    pub actor_preferences: Vec<[f64; 2]>,
    #[serde(default = "zero_visits")]
    pub visits: Vec<[u32; 2]>,
}

impl Default for ActorCriticTables {
    fn default() -> Self {
        Self {
            critic_values: vec![0.0; NUM_STATES],
            actor_preferences: vec![[0.0; 2]; NUM_STATES],
            visits: zero_visits(),
        }
    }
}

impl ActorCriticTables {
    pub fn value(&self, next: Successor) -> f64 {
        match next {
            Successor::State(id) => self.critic_values[id.index()],
            Successor::Failure => 0.0,
        }
    }

    pub fn preferences(&self, s: DiscreteStateId) -> [f64; 2] {
        self.actor_preferences[s.index()]
    }
}

/// Accumulating eligibility traces, one per (state, action) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTable {
    pub values: Vec<[f64; 2]>,
}

impl Default for TraceTable {
    fn default() -> Self {
        Self { values: vec![[0.0; 2]; NUM_STATES] }
    }
}

impl TraceTable {
    pub fn get(&self, s: DiscreteStateId, a: Action) -> f64 {
        self.values[s.index()][a.index()]
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|row| *row = [0.0; 2]);
    }

    fn state_sum(&self, index: usize) -> f64 {
        let [l, r] = self.values[index];
        l + r
    }
}

/// Decays every trace by `lambda * gamma`, then adds one to the visited pair.
pub fn trace_forward(traces: &mut TraceTable, visited: (DiscreteStateId, Action), config: &AgentConfig) {
    let decay = config.trace_decay();
    for row in traces.values.iter_mut() {
        row[0] *= decay;
        row[1] *= decay;
    }
    traces.values[visited.0.index()][visited.1.index()] += 1.0;
}

/// Exact inverse of [`trace_forward`] for the same visited pair.
pub fn trace_backward(
    traces: &mut TraceTable,
    visited: (DiscreteStateId, Action),
    config: &AgentConfig,
) -> Result<()> {
    let decay = config.trace_decay();
    if decay == 0.0 {
        return Err(Error::ZeroTraceDecay);
    }
    traces.values[visited.0.index()][visited.1.index()] -= 1.0;
    for row in traces.values.iter_mut() {
        row[0] /= decay;
        row[1] /= decay;
    }
    Ok(())
}

/// Picks an action from a row of action values.
///
/// Greedy ties resolve to `PushLeft`. Epsilon-greedy always draws one
/// uniform for the explore decision and a second one only when exploring.
pub fn select_from_row<R: Rng + ?Sized>(
    row: [f64; 2],
    selection: Selection,
    epsilon: f64,
    temperature: f64,
    rng: &mut R,
) -> Action {
    match selection {
        Selection::EpsilonGreedy => {
            if rng.gen::<f64>() < epsilon {
                if rng.gen::<bool>() {
                    Action::PushRight
                } else {
                    Action::PushLeft
                }
            } else {
                greedy(row)
            }
        }
        Selection::Boltzmann => {
            if rng.gen::<f64>() < boltzmann_right_probability(row, temperature) {
                Action::PushRight
            } else {
                Action::PushLeft
            }
        }
    }
}

pub fn greedy(row: [f64; 2]) -> Action {
    if row[1] > row[0] {
        Action::PushRight
    } else {
        Action::PushLeft
    }
}

/// Softmax probability of `PushRight` for a two-action row.
pub fn boltzmann_right_probability(row: [f64; 2], temperature: f64) -> f64 {
    let z = (row[1] - row[0]) / temperature;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One Q-learning update. With traces, credit is spread over every pair in
/// proportion to its trace after the forward decay of the visited pair.
#[allow(clippy::too_many_arguments)]
pub fn q_update(
    q: &mut QTable,
    s: DiscreteStateId,
    a: Action,
    reward: f64,
    next: Successor,
    config: &AgentConfig,
    traces: Option<&mut TraceTable>,
) {
    let delta = reward + config.gamma * q.max_next(next) - q.get(s, a);
    q.visits[s.index()][a.index()] = q.visits[s.index()][a.index()].saturating_add(1);
    match traces {
        None => {
            let rate = config.rate(config.alpha, q.visits[s.index()][a.index()]);
            q.values[s.index()][a.index()] += rate * delta;
        }
        Some(traces) => {
            trace_forward(traces, (s, a), config);
            for (i, (row, trace)) in q.values.iter_mut().zip(&traces.values).enumerate() {
                for k in 0..2 {
                    if trace[k] != 0.0 {
                        row[k] += config.rate(config.alpha, q.visits[i][k]) * delta * trace[k];
                    }
                }
            }
        }
    }
}

/// One TD actor-critic update. The critic trace of a state is the sum of its
/// two pair traces, which decays and accumulates exactly like a state trace.
#[allow(clippy::too_many_arguments)]
pub fn actor_critic_update(
    tables: &mut ActorCriticTables,
    s: DiscreteStateId,
    a: Action,
    reward: f64,
    next: Successor,
    config: &AgentConfig,
    traces: Option<&mut TraceTable>,
) {
    let delta = reward + config.gamma * tables.value(next) - tables.critic_values[s.index()];
    tables.visits[s.index()][a.index()] = tables.visits[s.index()][a.index()].saturating_add(1);
    match traces {
        None => {
            let [left, right] = tables.visits[s.index()];
            let state_visits = left.saturating_add(right);
            let pair_visits = tables.visits[s.index()][a.index()];
            tables.critic_values[s.index()] += config.rate(config.alpha, state_visits) * delta;
            tables.actor_preferences[s.index()][a.index()] += config.rate(config.actor_alpha, pair_visits) * delta;
        }
        Some(traces) => {
            trace_forward(traces, (s, a), config);
            for i in 0..NUM_STATES {
                let state_trace = traces.state_sum(i);
                if state_trace == 0.0 {
                    continue;
                }
                let visits = tables.visits[i][0].saturating_add(tables.visits[i][1]);
                tables.critic_values[i] += config.rate(config.alpha, visits) * delta * state_trace;
                for k in 0..2 {
                    let rate = config.rate(config.actor_alpha, tables.visits[i][k]);
                    tables.actor_preferences[i][k] += rate * delta * traces.values[i][k];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    QLearning,
    ActorCritic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum Learner {
    QLearning(QTable),
    ActorCritic(ActorCriticTables),
}

/// A learner plus its live trace table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub learner: Learner,
    pub traces: Option<TraceTable>,
}

impl Agent {
    pub fn new(algorithm: Algorithm, config: AgentConfig) -> Self {
        let learner = match algorithm {
            Algorithm::QLearning => Learner::QLearning(QTable::default()),
            Algorithm::ActorCritic => Learner::ActorCritic(ActorCriticTables::default()),
        };
        let traces = config.traces_enabled.then(TraceTable::default);
        Self { config, learner, traces }
    }

    /// Values the policy acts on in `s`: Q-values or actor preferences.
    pub fn row(&self, s: DiscreteStateId) -> [f64; 2] {
        match &self.learner {
            Learner::QLearning(q) => q.row(s),
            Learner::ActorCritic(ac) => ac.preferences(s),
        }
    }

    pub fn select<R: Rng + ?Sized>(&self, s: DiscreteStateId, epsilon: f64, rng: &mut R) -> Action {
        let selection = match self.learner {
            Learner::QLearning(_) => self.config.selection,
            Learner::ActorCritic(_) => Selection::Boltzmann,
        };
        select_from_row(self.row(s), selection, epsilon, self.config.temperature, rng)
    }

    /// Greedy (Q) or modal (actor-critic) action, used with learning off.
    pub fn greedy(&self, s: DiscreteStateId) -> Action {
        greedy(self.row(s))
    }

    pub fn update(&mut self, s: DiscreteStateId, a: Action, reward: f64, next: Successor) {
        match &mut self.learner {
            Learner::QLearning(q) => q_update(q, s, a, reward, next, &self.config, self.traces.as_mut()),
            Learner::ActorCritic(ac) => {
                actor_critic_update(ac, s, a, reward, next, &self.config, self.traces.as_mut())
            }
        }
    }

    pub fn reset_traces(&mut self) {
        if let Some(t) = self.traces.as_mut() {
            t.clear();
        }
    }

    pub fn all_finite(&self) -> bool {
        let rows_finite = |rows: &[[f64; 2]]| rows.iter().flatten().all(|v| v.is_finite());
        let learned = match &self.learner {
            Learner::QLearning(q) => rows_finite(&q.values),
            Learner::ActorCritic(ac) => {
                rows_finite(&ac.actor_preferences) && ac.critic_values.iter().all(|v| v.is_finite())
            }
        };
        learned && self.traces.as_ref().is_none_or(|t| rows_finite(&t.values))
    }
}
