//! Environment facade: reset/step semantics, observations and rewards.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{neighbors_in_range, resolve_moves, Action, Cell, CellKind, GridError, GridMap};
use crate::rng::{derive_seed, stream};
use crate::uncertainty::{
    global_update, uncertainty_scenario2, ClockOwner, EventField, Rates, Scenario, SyncWindow, UncertaintyError,
    UncertaintyField, VisitClock, VisitLog,
};
use crate::Timestep;

pub const OBS_CHANNELS: usize = 3;
pub const EGO_MARK: f32 = 1.0;
pub const NEIGHBOR_MARK: f32 = 0.5;
pub const ROAD_MARK: f32 = 1.0;
pub const FREE_MARK: f32 = 0.0;
pub const OBSTACLE_MARK: f32 = -1.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("cannot place {agents} agents on {roads} road cells")]
    Placement { agents: usize, roads: usize },
    #[error("expected {expected} actions, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("episode already reached its {0} steps")]
    EpisodeOver(usize),
    #[error("environment used before reset")]
    NotReset,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Three M×M channels, channel-major: agent positions, static map, uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    size: usize,
    data: Vec<f32>,
}

impl Observation {
    pub fn from_raw(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), OBS_CHANNELS * size * size, "observation shape");
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn positions(&self) -> &[f32] {
        self.channel(0)
    }

    pub fn map(&self) -> &[f32] {
        self.channel(1)
    }

    pub fn uncertainty(&self) -> &[f32] {
        self.channel(2)
    }
}

/// Builds agent `ego`'s observation. `visible` lists the other agents whose
/// positions are shown; `uncertainty` is the field the agent acts on.
pub fn encode_observation(
    map: &GridMap,
    positions: &[Cell],
    ego: usize,
    visible: &[usize],
    uncertainty: &[f64],
) -> Observation {
    let m = map.size();
    let n = m * m;
    let mut data = vec![0.0f32; OBS_CHANNELS * n];
    for &j in visible {
        if j != ego {
            data[map.index(positions[j])] = NEIGHBOR_MARK;
        }
    }
    data[map.index(positions[ego])] = EGO_MARK;
    for (k, kind) in map.kinds().iter().enumerate() {
        data[n + k] = match kind {
            CellKind::Road => ROAD_MARK,
            CellKind::Free => FREE_MARK,
            CellKind::Obstacle => OBSTACLE_MARK,
        };
    }
    for (k, &u) in uncertainty.iter().enumerate() {
        data[2 * n + k] = u as f32;
    }
    Observation { size: m, data }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Penalty for a rejected move (r^c).
    pub collision: f64,
    /// Bonus for the team's first visit of a cell in the episode (r^n).
    pub novelty: f64,
    /// Weight of the pre-visit uncertainty term (λ).
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { collision: -20.0, novelty: 1.0, lambda: 5.0 }
    }
}

/// `r = r^c·[collided] + r^n·[novel] + λ·u_pre`.
pub fn compute_reward(collided: bool, novel: bool, u_pre: f64, cfg: &RewardConfig) -> f64 {
    let mut r = 0.0;
    if collided {
        r += cfg.collision;
    }
    if novel {
        r += cfg.novelty;
    }
    r + cfg.lambda * u_pre
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// No active events and every clock at 0.
    Blank,
    /// Random active events or random last-visit offsets.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub agents: usize,
    /// Event arrival rate on road cells, per step.
    pub alpha: f64,
    /// Steps between agent/center exchanges (T_u). Forced to 1 in Scenario I.
    pub sync_period: u32,
    /// Sensing radius in meters.
    pub sensing_range: f64,
    pub init_mode: InitMode,
    /// Steps per episode (T_ep).
    pub episode_len: usize,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Visit-log capacity L; defaults to the sync period.
    #[serde(default)]
    pub log_capacity: Option<usize>,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.agents == 0 {
            return bad("at least one agent is required");
        }
        if self.sync_period == 0 {
            return bad("sync period must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.sensing_range.is_finite() && self.sensing_range > 0.0) {
            return bad("sensing range must be positive");
        }
        if self.episode_len == 0 {
            return bad("episode length must be positive");
        }
        if self.reward.collision > 0.0 || self.reward.novelty < 0.0 || self.reward.lambda < 0.0 {
            return bad("reward constants out of range");
        }
        Ok(())
    }

    pub fn effective_sync_period(&self) -> u32 {
        match self.scenario {
            Scenario::Continuous => 1,
            Scenario::Periodic => self.sync_period,
        }
    }

    pub fn effective_log_capacity(&self) -> usize {
        self.log_capacity.unwrap_or(self.effective_sync_period() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// Time after the step.
    pub t: Timestep,
    pub actions: Vec<Action>,
    pub from: Vec<Cell>,
    pub to: Vec<Cell>,
    pub collided: Vec<bool>,
    /// Whether the novelty bonus was granted.
    pub novel: Vec<bool>,
    /// True uncertainty of each destination just before the visit; zero for
    /// rejected moves.
    pub u_pre: Vec<f64>,
    /// True Σ_k u_k after the step.
    pub total_uncertainty: f64,
    /// Σ_k of each agent's own estimate after the step.
    pub local_totals: Vec<f64>,
    /// Whether an agent/center exchange happened at the end of the step.
    pub synced: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub info: StepInfo,
}

struct EpisodeState {
    t: Timestep,
    positions: Vec<Cell>,
    truth: VisitClock,
    center: VisitClock,
    locals: Vec<VisitClock>,
    logs: Vec<VisitLog>,
    events: EventField,
    visited: Vec<bool>,
}

/// One simulation instance. Single-threaded; run several with distinct seeds
/// for parallel rollouts.
pub struct Env {
    map: Arc<GridMap>,
    cfg: EnvConfig,
    rates: Rates,
    state: Option<EpisodeState>,
}

impl Env {
    pub fn new(map: Arc<GridMap>, cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let rates = Rates::uniform_on_roads(&map, cfg.alpha);
        Ok(Self { map, cfg, rates, state: None })
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn shared_map(&self) -> Arc<GridMap> {
        Arc::clone(&self.map)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    /// Starts an episode with agents on distinct random road cells.
    ///
    /// The placement shuffle does not depend on the number of agents, so
    /// runs that differ only in N share their first agents' start cells.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        let roads = self.map.road_cells();
        if self.cfg.agents > roads.len() {
            return Err(EnvError::Placement { agents: self.cfg.agents, roads: roads.len() });
        }
        let mut order = roads;
        order.shuffle(&mut stream(derive_seed(seed, "placement")));
        let positions = order[..self.cfg.agents].iter().map(|&k| self.map.cell(k)).collect();
        self.reset_with_positions(seed, positions)
    }

    /// Starts an episode with caller-chosen start cells.
    pub fn reset_with_positions(&mut self, seed: u64, positions: Vec<Cell>) -> Result<Vec<Observation>, EnvError> {
        if positions.len() != self.cfg.agents {
            return Err(EnvError::Arity { expected: self.cfg.agents, got: positions.len() });
        }
        for (i, p) in positions.iter().enumerate() {
            if !self.map.is_occupiable(*p) || positions[..i].contains(p) {
                return Err(GridError::InvariantViolation(format!("invalid start cell {p}")).into());
            }
        }
        let k = self.map.num_cells();
        let mut init_rng = stream(derive_seed(seed, "init"));
        let mut events = EventField::new(k, stream(derive_seed(seed, "events")));
        let mut truth = VisitClock::new(k, 0, ClockOwner::Truth);
        if self.cfg.init_mode == InitMode::Random {
            let horizon = if self.cfg.alpha > 0.0 { (3.0 / self.cfg.alpha).ceil() as i64 } else { 0 };
            let mut tau = vec![0; k];
            for road in self.map.road_cells() {
                match self.cfg.scenario {
                    Scenario::Continuous => events.set(road, init_rng.gen_bool(0.5)),
                    Scenario::Periodic => tau[road] = -init_rng.gen_range(0..=horizon),
                }
            }
            truth = VisitClock::from_times(tau, ClockOwner::Truth);
        }
        let occupied: Vec<usize> = positions.iter().map(|&p| self.map.index(p)).collect();
        truth.record_visits(occupied.iter().copied(), 0);
        events.clear(occupied.iter().copied());
        let mut visited = vec![false; k];
        for &c in &occupied {
            visited[c] = true;
        }
        let n = self.cfg.agents;
        let log_capacity = self.cfg.effective_log_capacity();
        self.state = Some(EpisodeState {
            t: 0,
            center: truth.with_owner(ClockOwner::Center),
            locals: (0..n).map(|i| truth.with_owner(ClockOwner::Agent(i))).collect(),
            logs: vec![VisitLog::new(log_capacity); n],
            truth,
            positions,
            events,
            visited,
        });
        self.observe_all()
    }

    fn state(&self) -> Result<&EpisodeState, EnvError> {
        self.state.as_ref().ok_or(EnvError::NotReset)
    }

    pub fn time(&self) -> Timestep {
        self.state.as_ref().map_or(0, |s| s.t)
    }

    pub fn is_done(&self) -> bool {
        self.time() >= self.cfg.episode_len as Timestep
    }

    pub fn positions(&self) -> &[Cell] {
        self.state.as_ref().map_or(&[], |s| &s.positions)
    }

    pub fn truth_clock(&self) -> Option<&VisitClock> {
        self.state.as_ref().map(|s| &s.truth)
    }

    pub fn center_clock(&self) -> Option<&VisitClock> {
        self.state.as_ref().map(|s| &s.center)
    }

    pub fn local_clock(&self, i: usize) -> Option<&VisitClock> {
        self.state.as_ref().and_then(|s| s.locals.get(i))
    }

    pub fn events(&self) -> Option<&EventField> {
        self.state.as_ref().map(|s| &s.events)
    }

    /// Forces an event at cell `k` (scripted Scenario I episodes).
    pub fn inject_event(&mut self, k: usize) -> Result<(), EnvError> {
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if self.map.kind_at(k) == CellKind::Road {
            state.events.set(k, true);
        }
        Ok(())
    }

    /// The true field at the current time.
    pub fn true_field(&self) -> Result<UncertaintyField, EnvError> {
        let s = self.state()?;
        Ok(match self.cfg.scenario {
            Scenario::Continuous => UncertaintyField::from_events(&s.events),
            Scenario::Periodic => s.truth.field(&self.rates, s.t)?,
        })
    }

    /// The field agent `i` acts on: the global event map in Scenario I, its
    /// local estimate in Scenario II.
    pub fn agent_field(&self, i: usize) -> Result<UncertaintyField, EnvError> {
        let s = self.state()?;
        Ok(match self.cfg.scenario {
            Scenario::Continuous => UncertaintyField::from_events(&s.events),
            Scenario::Periodic => s.locals[i].field(&self.rates, s.t)?,
        })
    }

    /// Agents whose positions agent `i` can see.
    pub fn visible_agents(&self, i: usize) -> Result<Vec<usize>, EnvError> {
        let s = self.state()?;
        Ok(match self.cfg.scenario {
            Scenario::Continuous => (0..s.positions.len()).filter(|&j| j != i).collect(),
            Scenario::Periodic => neighbors_in_range(&s.positions, i, self.cfg.sensing_range, self.map.cell_width())?,
        })
    }

    pub fn observe(&self, i: usize) -> Result<Observation, EnvError> {
        let s = self.state()?;
        if i >= s.positions.len() {
            return Err(GridError::IndexOutOfRange { index: i, agents: s.positions.len() }.into());
        }
        let field = self.agent_field(i)?;
        let visible = self.visible_agents(i)?;
        Ok(encode_observation(&self.map, &s.positions, i, &visible, field.values()))
    }

    pub fn observe_all(&self) -> Result<Vec<Observation>, EnvError> {
        (0..self.cfg.agents).map(|i| self.observe(i)).collect()
    }

    /// Advances the world by one step:
    /// move resolution, rewards from the pre-visit truth, clearing of visited
    /// cells, arrivals, local updates, the periodic exchange and finally the
    /// new observations.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult, EnvError> {
        let n = self.cfg.agents;
        if actions.len() != n {
            return Err(EnvError::Arity { expected: n, got: actions.len() });
        }
        if self.state.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.is_done() {
            return Err(EnvError::EpisodeOver(self.cfg.episode_len));
        }
        let map = Arc::clone(&self.map);
        let scenario = self.cfg.scenario;
        let period = self.cfg.effective_sync_period();
        let reward_cfg = self.cfg.reward;
        let sensing = self.cfg.sensing_range;
        let s = self.state.as_mut().expect("checked above");

        let outcome = resolve_moves(&map, &s.positions, actions)?;
        let t1 = s.t + 1;
        let dest: Vec<usize> = outcome.positions.iter().map(|&p| map.index(p)).collect();

        let mut rewards = Vec::with_capacity(n);
        let mut novel = Vec::with_capacity(n);
        let mut u_pre = Vec::with_capacity(n);
        for i in 0..n {
            let k = dest[i];
            let collided = outcome.collided[i];
            let u = if collided {
                0.0
            } else {
                match scenario {
                    Scenario::Continuous => f64::from(u8::from(s.events.is_active(k))),
                    Scenario::Periodic => uncertainty_scenario2(self.rates.get(k), t1, s.truth.tau(k))?,
                }
            };
            let is_novel = !collided && !s.visited[k];
            rewards.push(compute_reward(collided, is_novel, u, &reward_cfg));
            novel.push(is_novel);
            u_pre.push(u);
        }
        for &k in &dest {
            s.visited[k] = true;
        }

        s.truth.record_visits(dest.iter().copied(), t1);
        let synced = t1 % Timestep::from(period) == 0;
        match scenario {
            Scenario::Continuous => {
                s.events.clear(dest.iter().copied());
                s.events.step(&self.rates);
                s.center.record_visits(dest.iter().copied(), t1);
            }
            Scenario::Periodic => {
                for i in 0..n {
                    let seen: Vec<usize> = neighbors_in_range(&outcome.positions, i, sensing, map.cell_width())?
                        .into_iter()
                        .map(|j| dest[j])
                        .collect();
                    s.locals[i].local_update(dest[i], seen, s.t);
                    s.logs[i].push(dest[i], t1);
                }
                if synced {
                    global_update(&mut s.center, &s.logs, SyncWindow::ending_at(t1, period), &self.rates)?;
                    for local in &mut s.locals {
                        local.reconcile(&s.center)?;
                    }
                    for log in &mut s.logs {
                        log.clear();
                    }
                }
            }
        }

        let from = std::mem::replace(&mut s.positions, outcome.positions);
        s.t = t1;

        let total_uncertainty = self.true_field()?.total();
        let local_totals = (0..n).map(|i| self.agent_field(i).map(|f| f.total())).collect::<Result<Vec<_>, _>>()?;
        let observations = self.observe_all()?;
        let to = self.positions().to_vec();
        Ok(StepResult {
            observations,
            rewards,
            info: StepInfo {
                t: t1,
                actions: actions.to_vec(),
                from,
                to,
                collided: outcome.collided,
                novel,
                u_pre,
                total_uncertainty,
                local_totals,
                synced,
            },
        })
    }
}
