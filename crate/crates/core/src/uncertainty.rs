//! Event processes, last-visit clocks and the two uncertainty models.
//!
//! Scenario I tracks binary event indicators that are cleared by a visit.
//! Scenario II tracks, per cell, the last time any agent visited it; the
//! uncertainty is the probability that at least one Poisson event arrived
//! since then. Agents hold local clocks which drift from the center's clock
//! between synchronizations.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{CellKind, GridMap};
use crate::rng::StreamRng;
use crate::Timestep;

/// Marks a cell that has never been visited.
pub const NEVER: Timestep = Timestep::MIN;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("visit log entry (cell {cell}, t={t}) outside sync window ({after}, {until}]")]
    StaleLog { cell: usize, t: Timestep, after: Timestep, until: Timestep },
    #[error("clock sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("malformed visit record {0:?}")]
    BadRecord(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Continuous communication, binary event indicators.
    #[serde(rename = "I")]
    Continuous,
    /// Periodic communication, staleness-based uncertainty.
    #[serde(rename = "II")]
    Periodic,
}

/// Per-cell event arrival rates (events per timestep).
#[derive(Clone, Debug, PartialEq)]
pub struct Rates(Vec<f64>);

impl Rates {
    /// Rate `alpha` on road cells and zero elsewhere.
    pub fn uniform_on_roads(map: &GridMap, alpha: f64) -> Self {
        Rates(map.kinds().iter().map(|&k| if k == CellKind::Road { alpha } else { 0.0 }).collect())
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Rates(values)
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Active-event indicators with their own arrival stream.
#[derive(Clone, Debug)]
pub struct EventField {
    active: Vec<bool>,
    rng: StreamRng,
}

impl EventField {
    pub fn new(num_cells: usize, rng: StreamRng) -> Self {
        Self { active: vec![false; num_cells], rng }
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    /// Sets an indicator directly. Used for initial conditions and scripted
    /// scenarios.
    pub fn set(&mut self, k: usize, on: bool) {
        self.active[k] = on;
    }

    /// Clears the events at visited cells.
    pub fn clear(&mut self, visited: impl IntoIterator<Item = usize>) {
        for k in visited {
            self.active[k] = false;
        }
    }

    /// One timestep of Poisson arrivals: an inactive cell becomes active with
    /// probability `1 - exp(-alpha_k)`. One uniform draw is consumed per cell
    /// with positive rate whatever its state, so the arrival stream does not
    /// depend on where the agents are.
    pub fn step(&mut self, rates: &Rates) {
        for (k, &alpha) in rates.as_slice().iter().enumerate() {
            if alpha <= 0.0 {
                continue;
            }
            let draw: f64 = self.rng.gen();
            if !self.active[k] && draw < -(-alpha).exp_m1() {
                self.active[k] = true;
            }
        }
    }
}

/// Uncertainty of a cell under the binary event model.
pub fn uncertainty_scenario1(event_active: bool) -> f64 {
    if event_active {
        1.0
    } else {
        0.0
    }
}

/// Uncertainty of a cell under the staleness model: `1 - exp(-alpha (t - tau))`.
///
/// Cells with zero rate are always certain; never-visited cells with positive
/// rate are maximally uncertain.
pub fn uncertainty_scenario2(alpha: f64, t: Timestep, tau: Timestep) -> Result<f64, UncertaintyError> {
    if alpha == 0.0 {
        return Ok(0.0);
    }
    if tau == NEVER {
        return Ok(1.0);
    }
    if t < tau {
        return Err(UncertaintyError::InvariantViolation(format!("last visit {tau} lies after current time {t}")));
    }
    Ok(-(-alpha * (t - tau) as f64).exp_m1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClockOwner {
    Truth,
    Center,
    Agent(usize),
}

/// Per-cell last-visit times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitClock {
    tau: Vec<Timestep>,
    owner: ClockOwner,
}

impl VisitClock {
    pub fn new(num_cells: usize, initial: Timestep, owner: ClockOwner) -> Self {
        Self { tau: vec![initial; num_cells], owner }
    }

    pub fn from_times(tau: Vec<Timestep>, owner: ClockOwner) -> Self {
        Self { tau, owner }
    }

    pub fn with_owner(&self, owner: ClockOwner) -> Self {
        Self { tau: self.tau.clone(), owner }
    }

    pub fn owner(&self) -> ClockOwner {
        self.owner
    }

    pub fn tau(&self, k: usize) -> Timestep {
        self.tau[k]
    }

    pub fn times(&self) -> &[Timestep] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Marks cells as visited at `t`. Last-visit times never move backwards.
    pub fn record_visits(&mut self, visited: impl IntoIterator<Item = usize>, t: Timestep) {
        for k in visited {
            self.tau[k] = self.tau[k].max(t);
        }
    }

    /// Local update of an agent between `t` and `t + 1`: its own cell and the
    /// cells it saw neighbors visit are stamped `t + 1`; everything else
    /// carries over.
    pub fn local_update(&mut self, own_cell: usize, seen: impl IntoIterator<Item = usize>, t: Timestep) {
        self.record_visits(std::iter::once(own_cell).chain(seen), t + 1);
    }

    /// Merges a center snapshot into a local clock, keeping the fresher time
    /// for each cell.
    pub fn reconcile(&mut self, center: &VisitClock) -> Result<(), UncertaintyError> {
        if self.tau.len() != center.tau.len() {
            return Err(UncertaintyError::SizeMismatch(self.tau.len(), center.tau.len()));
        }
        for (mine, &theirs) in self.tau.iter_mut().zip(&center.tau) {
            *mine = (*mine).max(theirs);
        }
        Ok(())
    }

    /// Staleness-model field at time `t`.
    pub fn field(&self, rates: &Rates, t: Timestep) -> Result<UncertaintyField, UncertaintyError> {
        let values = self
            .tau
            .iter()
            .zip(rates.as_slice())
            .map(|(&tau, &alpha)| uncertainty_scenario2(alpha, t, tau))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(UncertaintyField { values, scenario: Scenario::Periodic })
    }
}

/// Free-function form of [`VisitClock::reconcile`].
pub fn reconcile_local(local: &mut VisitClock, center: &VisitClock) -> Result<(), UncertaintyError> {
    local.reconcile(center)
}

/// Per-cell uncertainty values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyField {
    values: Vec<f64>,
    scenario: Scenario,
}

impl UncertaintyField {
    pub fn from_events(events: &EventField) -> Self {
        Self {
            values: events.active().iter().map(|&e| uncertainty_scenario1(e)).collect(),
            scenario: Scenario::Continuous,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    /// Σ_k u_k, summed in row-major order.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// M rows of M comma-separated values.
    pub fn to_csv(&self, size: usize) -> String {
        let mut out = String::new();
        for row in self.values.chunks(size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Bounded FIFO of (cell, timestep) visit records kept by one agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitLog {
    entries: VecDeque<(usize, Timestep)>,
    capacity: usize,
}

impl VisitLog {
    pub fn new(capacity: usize) -> Self {
        Self { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a record, evicting the oldest one when full.
    pub fn push(&mut self, cell: usize, t: Timestep) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((cell, t));
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, Timestep)> + '_ {
        self.entries.iter().copied()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// One `(k,t)` record per line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (k, t) in self.entries() {
            let _ = writeln!(out, "({k},{t})");
        }
        out
    }

    pub fn from_records(text: &str, capacity: usize) -> Result<Self, UncertaintyError> {
        let mut log = VisitLog::new(capacity);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let bad = || UncertaintyError::BadRecord(line.to_string());
            let inner = line.strip_prefix('(').and_then(|l| l.strip_suffix(')')).ok_or_else(bad)?;
            let (k, t) = inner.split_once(',').ok_or_else(bad)?;
            log.push(k.trim().parse().map_err(|_| bad())?, t.trim().parse().map_err(|_| bad())?);
        }
        Ok(log)
    }
}

/// Visit timestamps covered by one synchronization: `(after, until]`.
///
/// A visit made while moving from `t` to `t + 1` is stamped `t + 1`, so the
/// sync at time `s` with period `T_u` covers the stamps `s - T_u + 1 ..= s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncWindow {
    pub after: Timestep,
    pub until: Timestep,
}

impl SyncWindow {
    pub fn ending_at(until: Timestep, period: u32) -> Self {
        Self { after: until - Timestep::from(period), until }
    }

    pub fn contains(&self, t: Timestep) -> bool {
        self.after < t && t <= self.until
    }
}

/// The center's periodic update: every cell visited in the window takes the
/// latest visit time found in the union of the agents' logs. Returns the
/// recomputed field at the end of the window.
pub fn global_update(
    center: &mut VisitClock,
    logs: &[VisitLog],
    window: SyncWindow,
    rates: &Rates,
) -> Result<UncertaintyField, UncertaintyError> {
    for log in logs {
        if let Some((cell, t)) = log.entries().find(|&(_, t)| !window.contains(t)) {
            return Err(UncertaintyError::StaleLog { cell, t, after: window.after, until: window.until });
        }
    }
    for log in logs {
        for (k, t) in log.entries() {
            center.tau[k] = center.tau[k].max(t);
        }
    }
    center.field(rates, window.until)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn staleness_examples() {
        assert_eq!(uncertainty_scenario2(0.01, 5, 5).unwrap(), 0.0);
        let u = uncertainty_scenario2(0.01, 100, 0).unwrap();
        assert!((u - 0.632_120_558_828_557_7).abs() < 1e-15);
        let u = uncertainty_scenario2(0.01, 10_000, 0).unwrap();
        // 1 - e^-100 rounds to exactly 1 in double precision
        assert_eq!(u, 1.0);
        let u = uncertainty_scenario2(0.01, 1_000, 0).unwrap();
        assert!(u > 0.999_95 && u < 1.0);
        assert_eq!(uncertainty_scenario2(0.01, 3, NEVER).unwrap(), 1.0);
        assert_eq!(uncertainty_scenario2(0.0, 3, NEVER).unwrap(), 0.0);
        assert!(matches!(uncertainty_scenario2(0.01, 3, 4), Err(UncertaintyError::InvariantViolation(_))));
    }

    #[test]
    fn binary_model() {
        assert_eq!(uncertainty_scenario1(true), 1.0);
        assert_eq!(uncertainty_scenario1(false), 0.0);
    }

    #[test]
    fn zero_rate_leaves_events_unchanged() {
        let mut f = EventField::new(4, stream(1));
        f.set(2, true);
        let before = f.active().to_vec();
        for _ in 0..100 {
            f.step(&Rates::from_vec(vec![0.0; 4]));
        }
        assert_eq!(f.active(), &before[..]);
    }

    #[test]
    fn active_events_persist_until_cleared() {
        let mut f = EventField::new(1, stream(2));
        f.set(0, true);
        for _ in 0..1000 {
            f.step(&Rates::from_vec(vec![0.5]));
            assert!(f.is_active(0));
        }
        f.clear([0]);
        assert!(!f.is_active(0));
    }

    #[test]
    fn arrival_frequency_matches_poisson() {
        let alpha: f64 = 0.01;
        let p = 1.0 - (-alpha).exp();
        let n = 100_000;
        let rates = Rates::from_vec(vec![alpha]);
        let mut f = EventField::new(1, stream(3));
        let mut hits = 0usize;
        for _ in 0..n {
            f.step(&rates);
            if f.is_active(0) {
                hits += 1;
                f.clear([0]);
            }
        }
        let freq = hits as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sigma, "freq {freq} vs {p} ± {}", 3.0 * sigma);
    }

    #[test]
    fn record_visits_keeps_latest() {
        let mut c = VisitClock::new(10, 0, ClockOwner::Center);
        c.record_visits([5], 10);
        c.record_visits([5], 20);
        assert_eq!(c.tau(5), 20);
        let before = c.clone();
        c.record_visits([], 30);
        assert_eq!(c, before);
        c.record_visits([3, 3], 25);
        assert_eq!(c.tau(3), 25);
    }

    #[test]
    fn local_update_stamps_own_and_seen_cells() {
        let mut c = VisitClock::new(12, 0, ClockOwner::Agent(0));
        c.local_update(7, [], 3);
        assert_eq!(c.tau(7), 4);
        assert!((0..12).filter(|&k| k != 7).all(|k| c.tau(k) == 0));
        c.local_update(7, [9], 4);
        assert_eq!(c.tau(9), 5);
    }

    #[test]
    fn global_update_takes_last_visit_in_window() {
        let rates = Rates::from_vec(vec![0.01; 6]);
        let mut center = VisitClock::new(6, 0, ClockOwner::Center);
        let t0 = 16;
        let mut log = VisitLog::new(8);
        log.push(2, t0 + 2);
        log.push(2, t0 + 5);
        let field = global_update(&mut center, &[log], SyncWindow::ending_at(t0 + 8, 8), &rates).unwrap();
        assert_eq!(center.tau(2), t0 + 5);
        assert_eq!(field.values()[2], uncertainty_scenario2(0.01, t0 + 8, t0 + 5).unwrap());

        let before = center.clone();
        let aged = global_update(&mut center, &[], SyncWindow::ending_at(t0 + 16, 8), &rates).unwrap();
        assert_eq!(center, before);
        assert_eq!(aged.values()[0], uncertainty_scenario2(0.01, t0 + 16, 0).unwrap());
    }

    #[test]
    fn global_update_rejects_stale_entries() {
        let rates = Rates::from_vec(vec![0.01; 4]);
        let mut center = VisitClock::new(4, 0, ClockOwner::Center);
        let mut log = VisitLog::new(4);
        log.push(1, 4);
        let err = global_update(&mut center, &[log], SyncWindow::ending_at(12, 4), &rates);
        assert!(matches!(err, Err(UncertaintyError::StaleLog { cell: 1, t: 4, .. })));
    }

    #[test]
    fn reconcile_keeps_fresher_time() {
        let mut local = VisitClock::from_times(vec![NEVER, 12, 3], ClockOwner::Agent(0));
        let center = VisitClock::from_times(vec![9, 9, 3], ClockOwner::Center);
        reconcile_local(&mut local, &center).unwrap();
        assert_eq!(local.times(), &[9, 12, 3]);
        let again = local.clone();
        local.reconcile(&local.clone()).unwrap();
        assert_eq!(local, again);
    }

    #[test]
    fn visit_log_is_bounded_and_serializable() {
        let mut log = VisitLog::new(3);
        for t in 1..=5 {
            log.push(t as usize * 2, t);
        }
        assert_eq!(log.len(), 3);
        assert_eq!(log.entries().map(|(_, t)| t).collect::<Vec<_>>(), vec![3, 4, 5]);
        let text = log.to_records();
        assert_eq!(text, "(6,3)\n(8,4)\n(10,5)\n");
        assert_eq!(VisitLog::from_records(&text, 3).unwrap(), log);
        assert!(VisitLog::from_records("6,3", 3).is_err());
    }

    #[test]
    fn field_csv_layout() {
        let clock = VisitClock::new(4, 0, ClockOwner::Center);
        let field = clock.field(&Rates::from_vec(vec![0.0; 4]), 3).unwrap();
        assert_eq!(field.to_csv(2), "0,0\n0,0\n");
    }

    proptest! {
        #[test]
        fn staleness_grows_with_age(alpha in 1e-4f64..1.0, tau in -1000i64..1000, age in 0i64..500) {
            let a = uncertainty_scenario2(alpha, tau + age, tau).unwrap();
            let b = uncertainty_scenario2(alpha, tau + age + 1, tau).unwrap();
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(uncertainty_scenario2(0.0, tau + age, tau).unwrap(), 0.0);
        }

        #[test]
        fn global_update_is_order_independent(
            visits in prop::collection::vec(prop::collection::vec((0usize..16, 1i64..=8), 0..8), 1..5)
        ) {
            let rates = Rates::from_vec(vec![0.02; 16]);
            let logs: Vec<VisitLog> = visits
                .iter()
                .map(|v| {
                    let mut log = VisitLog::new(8);
                    for &(k, t) in v { log.push(k, t); }
                    log
                })
                .collect();
            let window = SyncWindow::ending_at(8, 8);
            let mut together = VisitClock::new(16, 0, ClockOwner::Center);
            let f1 = global_update(&mut together, &logs, window, &rates).unwrap();
            let mut reversed = VisitClock::new(16, 0, ClockOwner::Center);
            for log in logs.iter().rev() {
                global_update(&mut reversed, std::slice::from_ref(log), window, &rates).unwrap();
            }
            let f2 = reversed.field(&rates, 8).unwrap();
            prop_assert_eq!(together, reversed);
            prop_assert_eq!(f1, f2);
        }
    }
}
