//! Snapshot store and rewind machinery.
//!
//! Every forward step is recorded as a [`Snapshot`]. On failure the session
//! picks an earlier time with a [`RewindPolicy`] and restores the matching
//! snapshot. Learned values never live in a snapshot, so whatever the learner
//! picked up from the failure survives the rewind.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{trace_backward, AgentConfig, TraceTable};
use crate::discretizer::DiscreteStateId;
use crate::env::{Action, ContinuousState};
use crate::error::{Error, Result};

/// Position of a ChaCha stream, enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: ContinuousState,
    pub traces: Option<TraceTable>,
    pub rng_state: RngState,
    pub time_index: u64,
}

impl Snapshot {
    pub fn new(state: ContinuousState, traces: Option<TraceTable>, rng: &ChaCha8Rng) -> Self {
        Self { state, traces, rng_state: RngState::capture(rng), time_index: state.time_index }
    }
}

/// Time-ordered snapshots of the running trial.
///
/// With a positive capacity the store thins itself by dropping alternating
/// interior entries; the first and the most recent entries are never dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotStore {
    entries: Vec<Snapshot>,
    capacity: usize,
    stride: u64,
}

impl SnapshotStore {
    /// `capacity` 0 means unbounded. Any other value below 2 is rejected.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 1 {
            return Err(Error::InvalidConfig("snapshot capacity must be 0 or at least 2".into()));
        }
        Ok(Self { entries: Vec::new(), capacity, stride: 1 })
    }

    pub fn entries(&self) -> &[Snapshot] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stride(&self) -> u64 {
        self.stride
    }

    pub fn times(&self) -> Vec<u64> {
        self.entries.iter().map(|s| s.time_index).collect()
    }

    pub fn latest(&self) -> Option<&Snapshot> {
        self.entries.last()
    }

    pub fn earliest(&self) -> Option<&Snapshot> {
        self.entries.first()
    }

    /// Drops everything and restarts the stride.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.stride = 1;
    }

    /// Appends a snapshot. Once thinned, a most-recent entry that falls off
    /// the stride grid is replaced by the next record.
    pub fn record(&mut self, snap: Snapshot) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if snap.time_index <= last.time_index {
                return Err(Error::NonMonotoneSnapshot { last: last.time_index, got: snap.time_index });
            }
        }
        if self.stride > 1 && self.entries.len() >= 2 {
            let origin = self.entries[0].time_index;
            let last = self.entries[self.entries.len() - 1].time_index;
            if !(last - origin).is_multiple_of(self.stride) {
                self.entries.pop();
            }
        }
        self.entries.push(snap);
        self.thin();
        Ok(())
    }

    /// Removes every second interior entry, doubling the stride, until the
    /// store fits its capacity.
    pub fn thin(&mut self) {
        if self.capacity == 0 {
            return;
        }
        while self.entries.len() > self.capacity {
            let last = self.entries.len() - 1;
            let mut position = 0;
            self.entries.retain(|_| {
                let i = position;
                position += 1;
                i == 0 || i == last || i % 2 == 0
            });
            self.stride *= 2;
        }
    }

    /// Restores the latest snapshot at or before `target_time` and discards
    /// everything after it. Targets older than the earliest retained entry
    /// restore the earliest one.
    pub fn rewind(
        &mut self,
        failure_time: u64,
        target_time: u64,
        escalation_level: u32,
    ) -> Result<(Snapshot, RewindEvent)> {
        let latest = self.entries.last().ok_or(Error::EmptyStore)?.time_index;
        if target_time > latest {
            return Err(Error::TargetInFuture { target: target_time, latest });
        }
        let found = self.entries.partition_point(|s| s.time_index <= target_time);
        let (keep, restored_from) = match found {
            0 => (1, RestoredFrom::EarliestRetained),
            n if self.entries[n - 1].time_index == target_time => (n, RestoredFrom::Exact),
            n => (n, RestoredFrom::NearestEarlier),
        };
        self.entries.truncate(keep);
        let snap = self.entries[keep - 1].clone();
        let event = RewindEvent {
            failure_time,
            target_time,
            restored_time: snap.time_index,
            restored_from,
            escalation_level,
        };
        Ok((snap, event))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewindKind {
    Halfway,
    FixedBack { k: u64 },
    FullReset,
    Geometric { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewindPolicy {
    #[serde(flatten)]
    pub kind: RewindKind,
    #[serde(default = "default_escalation")]
    pub escalation: bool,
}

fn default_escalation() -> bool {
    true
}

impl Default for RewindPolicy {
    fn default() -> Self {
        Self { kind: RewindKind::Halfway, escalation: true }
    }
}

impl RewindPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RewindKind::FixedBack { k: 0 } => {
                Err(Error::InvalidConfig("rewind_policy.k must be at least 1".into()))
            }
            RewindKind::Geometric { p } if !(p > 0.0 && p < 1.0) => {
                Err(Error::InvalidConfig(format!("rewind_policy.p must lie in (0, 1), got {p}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoredFrom {
    Exact,
    NearestEarlier,
    EarliestRetained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewindEvent {
    pub failure_time: u64,
    pub target_time: u64,
    pub restored_time: u64,
    pub restored_from: RestoredFrom,
    pub escalation_level: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewindChoice {
    pub target_time: u64,
    pub escalation_level: u32,
}

/// Picks where to rewind to after a failure at `failure_time`.
///
/// `prior_events` are the rewinds already made in this trial, oldest first.
/// With escalation on, each consecutive failure that does not get past the
/// previous failure point doubles the base rewind distance.
pub fn choose_rewind_target<R: Rng + ?Sized>(
    policy: &RewindPolicy,
    trial_start: u64,
    failure_time: u64,
    prior_events: &[RewindEvent],
    rng: &mut R,
) -> RewindChoice {
    debug_assert!(failure_time > trial_start);
    let span = failure_time - trial_start;
    let distance = match policy.kind {
        RewindKind::Halfway => span - span / 2,
        RewindKind::FixedBack { k } => k,
        RewindKind::FullReset => span,
        RewindKind::Geometric { p } => {
            // inverse CDF of the geometric distribution on {1, 2, ...}
            let u: f64 = rng.gen();
            let draws = ((1.0 - u).ln() / (1.0 - p).ln()).floor();
            if draws.is_finite() && draws < span as f64 {
                1 + draws as u64
            } else {
                span
            }
        }
    };
    let escalation_level = match prior_events.last() {
        Some(prev) if policy.escalation && failure_time <= prev.failure_time => prev.escalation_level + 1,
        _ => 0,
    };
    let scaled = distance.checked_shl(escalation_level).filter(|d| d >> escalation_level == distance);
    let distance = scaled.unwrap_or(u64::MAX).min(span);
    RewindChoice { target_time: failure_time - distance, escalation_level }
}

/// Rolls traces back `steps_back` visits with the analytic inverse decay.
///
/// `visited_history[k]` is the pair visited on the step from time `k` to
/// `k + 1`; the last `steps_back` entries are undone, newest first.
pub fn reverse_traces_analytic(
    traces: &TraceTable,
    visited_history: &[(DiscreteStateId, Action)],
    steps_back: usize,
    config: &AgentConfig,
) -> Result<TraceTable> {
    if steps_back > visited_history.len() {
        return Err(Error::HistoryExhausted { requested: steps_back, available: visited_history.len() });
    }
    let mut out = traces.clone();
    if steps_back == 0 {
        return Ok(out);
    }
    if config.trace_decay() == 0.0 {
        return Err(Error::ZeroTraceDecay);
    }
    for &visit in visited_history.iter().rev().take(steps_back) {
        trace_backward(&mut out, visit, config)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::agent::trace_forward;

    fn snap(t: u64) -> Snapshot {
        let rng = ChaCha8Rng::seed_from_u64(t);
        Snapshot::new(ContinuousState { x: t as f64 * 0.01, time_index: t, ..Default::default() }, None, &rng)
    }

    fn store_with(times: impl IntoIterator<Item = u64>, capacity: usize) -> SnapshotStore {
        let mut store = SnapshotStore::new(capacity).unwrap();
        for t in times {
            store.record(snap(t)).unwrap();
        }
        store
    }

    fn no_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn record_basics() {
        let store = store_with([0], 0);
        assert_eq!(store.len(), 1);
        let mut store = store_with([0, 7], 0);
        assert!(matches!(store.record(snap(5)), Err(Error::NonMonotoneSnapshot { last: 7, got: 5 })));
        assert!(store.record(snap(7)).is_err());
        assert_eq!(store_with(0..1000, 0).len(), 1000);
    }

    #[test]
    fn thinning_drops_alternate_interior_entries() {
        let store = store_with(0..=8, 8);
        assert_eq!(store.times(), vec![0, 2, 4, 6, 8]);
        assert_eq!(store.stride(), 2);

        let store = store_with(0..8, 8);
        assert_eq!(store.times(), (0..8).collect::<Vec<_>>());
        assert_eq!(store.stride(), 1);
    }

    #[test]
    fn thinned_store_keeps_stride_grid() {
        let store = store_with(0..=16, 8);
        assert_eq!(store.times(), vec![0, 4, 8, 12, 16]);
        assert_eq!(store.stride(), 4);
        let store = store_with(0..=10, 8);
        assert_eq!(store.times(), vec![0, 2, 4, 6, 8, 10]);
        let store = store_with(0..=11, 8);
        assert_eq!(store.times(), vec![0, 2, 4, 6, 8, 10, 11]);
    }

    #[test]
    fn capacity_one_rejected() {
        assert!(SnapshotStore::new(1).is_err());
        assert_eq!(store_with(0..50, 2).times(), vec![0, 49]);
    }

    #[test]
    fn rewind_exact_and_nearest() {
        let mut store = store_with(0..=10, 0);
        let (s, e) = store.rewind(10, 5, 0).unwrap();
        assert_eq!(s.time_index, 5);
        assert_eq!(e.restored_from, RestoredFrom::Exact);
        assert_eq!(store.times(), (0..=5).collect::<Vec<_>>());

        let mut store = store_with(0..=8, 8);
        let (s, e) = store.rewind(9, 5, 0).unwrap();
        assert_eq!(s.time_index, 4);
        assert_eq!(e.restored_from, RestoredFrom::NearestEarlier);
        assert_eq!(e.target_time, 5);
        assert_eq!(store.times(), vec![0, 2, 4]);
    }

    #[test]
    fn rewind_errors_and_earliest() {
        let mut empty = SnapshotStore::new(0).unwrap();
        assert!(matches!(empty.rewind(3, 1, 0), Err(Error::EmptyStore)));

        let mut store = store_with(10..=20, 0);
        assert!(matches!(store.rewind(30, 25, 0), Err(Error::TargetInFuture { .. })));
        let (s, e) = store.rewind(20, 3, 0).unwrap();
        assert_eq!(s.time_index, 10);
        assert_eq!(e.restored_from, RestoredFrom::EarliestRetained);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let _: u64 = rng.gen();
        let _: f64 = rng.gen();
        let saved = RngState::capture(&rng);
        let ahead: Vec<u32> = (0..10).map(|_| rng.gen()).collect();
        let mut restored = saved.restore();
        let again: Vec<u32> = (0..10).map(|_| restored.gen()).collect();
        assert_eq!(ahead, again);
    }

    #[test]
    fn policy_targets() {
        let mut rng = no_rng();
        let halfway = RewindPolicy::default();
        assert_eq!(choose_rewind_target(&halfway, 0, 100, &[], &mut rng).target_time, 50);
        assert_eq!(choose_rewind_target(&halfway, 0, 7, &[], &mut rng).target_time, 3);
        assert_eq!(choose_rewind_target(&halfway, 0, 1, &[], &mut rng).target_time, 0);
        assert_eq!(choose_rewind_target(&halfway, 10, 30, &[], &mut rng).target_time, 20);

        let back1 = RewindPolicy { kind: RewindKind::FixedBack { k: 1 }, escalation: false };
        assert_eq!(choose_rewind_target(&back1, 0, 7, &[], &mut rng).target_time, 6);
        let back5 = RewindPolicy { kind: RewindKind::FixedBack { k: 5 }, escalation: false };
        assert_eq!(choose_rewind_target(&back5, 0, 3, &[], &mut rng).target_time, 0);

        let reset = RewindPolicy { kind: RewindKind::FullReset, escalation: false };
        assert_eq!(choose_rewind_target(&reset, 0, 321, &[], &mut rng).target_time, 0);
        assert_eq!(choose_rewind_target(&reset, 4, 321, &[], &mut rng).target_time, 4);
    }

    #[test]
    fn geometric_distance_distribution() {
        let policy = RewindPolicy { kind: RewindKind::Geometric { p: 0.25 }, escalation: false };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut total = 0u64;
        let mut ones = 0;
        for _ in 0..n {
            let c = choose_rewind_target(&policy, 0, 10_000, &[], &mut rng);
            let d = 10_000 - c.target_time;
            assert!(d >= 1);
            total += d;
            ones += usize::from(d == 1);
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 4.0).abs() < 0.15, "mean distance {mean}");
        let p1 = ones as f64 / n as f64;
        assert!((p1 - 0.25).abs() < 0.02, "P(d=1) = {p1}");
        // clamped at the trial start
        for _ in 0..100 {
            assert!(choose_rewind_target(&policy, 5, 6, &[], &mut rng).target_time == 5);
        }
    }

    #[test]
    fn escalation_doubles_distance() {
        let mut rng = no_rng();
        let policy = RewindPolicy { kind: RewindKind::FixedBack { k: 3 }, escalation: true };
        let first = choose_rewind_target(&policy, 0, 40, &[], &mut rng);
        assert_eq!((first.target_time, first.escalation_level), (37, 0));
        let ev = |failure_time, level| RewindEvent {
            failure_time,
            target_time: 0,
            restored_time: 0,
            restored_from: RestoredFrom::Exact,
            escalation_level: level,
        };
        let second = choose_rewind_target(&policy, 0, 39, &[ev(40, 0)], &mut rng);
        assert_eq!((second.target_time, second.escalation_level), (33, 1));
        let third = choose_rewind_target(&policy, 0, 36, &[ev(40, 0), ev(39, 1)], &mut rng);
        assert_eq!((third.target_time, third.escalation_level), (24, 2));
        // got past the previous failure point: back to the base distance
        let fresh = choose_rewind_target(&policy, 0, 37, &[ev(40, 0), ev(39, 1), ev(36, 2)], &mut rng);
        assert_eq!((fresh.target_time, fresh.escalation_level), (34, 0));
        let deep = choose_rewind_target(&policy, 0, 10, &[ev(40, 70)], &mut rng);
        assert_eq!(deep.target_time, 0);

        let plain = RewindPolicy { escalation: false, ..policy };
        assert_eq!(choose_rewind_target(&plain, 0, 39, &[ev(40, 0)], &mut rng).escalation_level, 0);
    }

    #[test]
    fn analytic_reversal_edges() {
        let config = AgentConfig { lambda: 0.8, gamma: 0.9, ..Default::default() };
        let s = DiscreteStateId::new(7).unwrap();
        let mut e = TraceTable::default();
        trace_forward(&mut e, (s, Action::PushLeft), &config);
        let history = vec![(s, Action::PushLeft)];
        assert_eq!(reverse_traces_analytic(&e, &history, 0, &config).unwrap(), e);
        assert_eq!(reverse_traces_analytic(&e, &history, 1, &config).unwrap(), TraceTable::default());
        assert!(matches!(
            reverse_traces_analytic(&e, &history, 2, &config),
            Err(Error::HistoryExhausted { requested: 2, available: 1 })
        ));
        let zero = AgentConfig { lambda: 0.0, ..config };
        assert!(matches!(reverse_traces_analytic(&e, &history, 1, &zero), Err(Error::ZeroTraceDecay)));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn store_stays_monotone_with_pinned_endpoints(
                gaps in proptest::collection::vec(1u64..5, 1..300),
                capacity in prop_oneof![Just(0usize), 2usize..40],
            ) {
                let mut store = SnapshotStore::new(capacity).unwrap();
                let mut t = 0;
                let first = t;
                store.record(snap(t)).unwrap();
                for g in gaps {
                    t += g;
                    store.record(snap(t)).unwrap();
                    let times = store.times();
                    prop_assert_eq!(times[0], first);
                    prop_assert_eq!(*times.last().unwrap(), t);
                    prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
                    if capacity > 0 {
                        prop_assert!(times.len() <= capacity);
                    }
                }
            }

            #[test]
            fn targets_stay_in_bounds(
                start in 0u64..50,
                span in 1u64..500,
                kind in 0u8..4,
                k in 1u64..20,
                p in 0.01f64..0.99,
                escalation in any::<bool>(),
                seed in any::<u64>(),
            ) {
                let kind = match kind {
                    0 => RewindKind::Halfway,
                    1 => RewindKind::FixedBack { k },
                    2 => RewindKind::FullReset,
                    _ => RewindKind::Geometric { p },
                };
                let policy = RewindPolicy { kind, escalation };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut events = Vec::new();
                let failure = start + span;
                for _ in 0..5 {
                    let c = choose_rewind_target(&policy, start, failure, &events, &mut rng);
                    prop_assert!(c.target_time >= start && c.target_time < failure);
                    events.push(RewindEvent {
                        failure_time: failure,
                        target_time: c.target_time,
                        restored_time: c.target_time,
                        restored_from: RestoredFrom::Exact,
                        escalation_level: c.escalation_level,
                    });
                }
            }
        }
    }
}
