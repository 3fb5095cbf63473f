//! Metrics, baseline policies, evaluation and sweeps.
//!
//! All reported averages are taken on the true field. Evaluation seeds run
//! independently and are folded in seed order, so results do not depend on
//! the number of workers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::gridworld::{Action, Cell, GridMap};
use crate::pomdp::{Env, EnvConfig, EnvError, Observation, EGO_MARK, NEIGHBOR_MARK, OBSTACLE_MARK};
use crate::qfunction::{argmax, AdamState, QParams};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::trainer::{EpisodeEnd, TrainObserver};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no evaluation seeds given")]
    NoSeeds,
    #[error("no sweep values given")]
    NoValues,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// A decentralized policy: one observation in, one action out.
pub trait Policy: Sync {
    fn name(&self) -> &str;
    fn act(&self, obs: &Observation, rng: &mut StreamRng) -> Result<Action, EvalError>;
}

/// Uniform over the nine actions.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&self, _obs: &Observation, rng: &mut StreamRng) -> Result<Action, EvalError> {
        Ok(Action::from_index(rng.gen_range(0..Action::COUNT)).expect("index in range"))
    }
}

/// Heads for the most uncertain cell of the agent's own map, without any
/// coordination with other agents.
pub struct GreedyUncertaintyPolicy;

impl GreedyUncertaintyPolicy {
    pub fn choose(obs: &Observation) -> Action {
        let m = obs.size();
        let u = obs.uncertainty();
        let mut target = 0;
        for k in 1..u.len() {
            if u[k] > u[target] {
                target = k;
            }
        }
        if u[target] <= 0.0 {
            return Action::Stay;
        }
        let Some(ego) = obs.positions().iter().position(|&v| v == EGO_MARK) else {
            return Action::Stay;
        };
        let (er, ec) = ((ego / m) as isize, (ego % m) as isize);
        let (tr, tc) = ((target / m) as isize, (target % m) as isize);
        let mut best = (isize::MAX, Action::Stay);
        for a in Action::ALL {
            let (dr, dc) = a.offset();
            let (r, c) = (er + dr, ec + dc);
            if r < 0 || c < 0 || r >= m as isize || c >= m as isize {
                continue;
            }
            let k = r as usize * m + c as usize;
            if a != Action::Stay && (obs.map()[k] == OBSTACLE_MARK || obs.positions()[k] == NEIGHBOR_MARK) {
                continue;
            }
            let d = (r - tr).abs() + (c - tc).abs();
            if d < best.0 {
                best = (d, a);
            }
        }
        best.1
    }
}

impl Policy for GreedyUncertaintyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn act(&self, obs: &Observation, _rng: &mut StreamRng) -> Result<Action, EvalError> {
        Ok(Self::choose(obs))
    }
}

/// Executes a trained Q-network without exploration.
pub struct QPolicy {
    params: QParams<f32>,
}

impl QPolicy {
    pub fn new(params: QParams<f32>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &QParams<f32> {
        &self.params
    }
}

impl Policy for QPolicy {
    fn name(&self) -> &str {
        "learned"
    }

    fn act(&self, obs: &Observation, _rng: &mut StreamRng) -> Result<Action, EvalError> {
        let q = self.params.forward(obs.data()).map_err(|e| EvalError::Policy(e.to_string()))?;
        Ok(Action::from_index(argmax(&q)).expect("index in range"))
    }
}

/// One environment step as seen by the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: i64,
    pub from: Vec<Cell>,
    pub to: Vec<Cell>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub collided: Vec<bool>,
    /// Σ_k u_k(t) on the true field.
    pub total_uncertainty: f64,
    /// Σ_k u_k(t) on each agent's own map.
    pub local_totals: Vec<f64>,
    /// Per-cell true field, kept only when requested.
    pub field: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub config: EnvConfig,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn collisions(&self) -> usize {
        self.steps.iter().map(|s| s.collided.iter().filter(|&&c| c).count()).sum()
    }

    /// Path records, one line per agent and step.
    pub fn to_csv(&self, map: &GridMap) -> String {
        let mut out =
            String::from("t,agent,cell_from,cell_to,action,reward,collided,total_uncertainty,local_uncertainty\n");
        for s in &self.steps {
            for i in 0..s.actions.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:?},{},{},{},{}",
                    s.t,
                    i,
                    map.index(s.from[i]),
                    map.index(s.to[i]),
                    s.actions[i],
                    s.rewards[i],
                    u8::from(s.collided[i]),
                    s.total_uncertainty,
                    s.local_totals[i]
                );
            }
        }
        out
    }

    pub fn series_csv(&self) -> String {
        let mut out = String::from("t,total_uncertainty\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{}", s.t, s.total_uncertainty);
        }
        out
    }
}

/// ū = (1/T) Σ_t Σ_k u_k(t).
pub fn average_uncertainty(trace: &EpisodeTrace) -> Result<f64, EvalError> {
    if trace.steps.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let sum: f64 = trace.steps.iter().map(|s| s.total_uncertainty).sum();
    Ok(sum / trace.steps.len() as f64)
}

/// Runs one full episode with `policy`.
pub fn run_episode(
    env: &mut Env,
    policy: &dyn Policy,
    seed: u64,
    keep_fields: bool,
) -> Result<EpisodeTrace, EvalError> {
    let mut obs = env.reset(seed)?;
    let mut rng = stream(derive_seed(seed, "eval-policy"));
    let mut steps = Vec::with_capacity(env.config().episode_len);
    while !env.is_done() {
        let actions = obs.iter().map(|o| policy.act(o, &mut rng)).collect::<Result<Vec<_>, _>>()?;
        let res = env.step(&actions)?;
        let field = if keep_fields { Some(env.true_field()?.values().to_vec()) } else { None };
        let info = res.info;
        steps.push(StepRecord {
            t: info.t,
            from: info.from,
            to: info.to,
            actions: info.actions,
            rewards: res.rewards,
            collided: info.collided,
            total_uncertainty: info.total_uncertainty,
            local_totals: info.local_totals,
            field,
        });
        obs = res.observations;
    }
    Ok(EpisodeTrace { seed, config: env.config().clone(), steps })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub policy: String,
    pub mean: f64,
    /// Sample standard deviation of per-seed ū (0 for a single seed).
    pub std: f64,
    pub per_seed: Vec<f64>,
    /// Collided agent-steps over all agent-steps.
    pub collision_rate: f64,
    pub traces: Vec<EpisodeTrace>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_seeds(
    policy: &dyn Policy,
    cfg: &EnvConfig,
    map: &Arc<GridMap>,
    seeds: &[u64],
    workers: usize,
    keep_fields: bool,
) -> Result<Vec<EpisodeTrace>, EvalError> {
    let one = |seed: u64| -> Result<EpisodeTrace, EvalError> {
        let mut env = Env::new(Arc::clone(map), cfg.clone())?;
        run_episode(&mut env, policy, seed, keep_fields)
    };
    if workers <= 1 {
        return seeds.iter().map(|&s| one(s)).collect();
    }
    use rayon::prelude::*;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| EvalError::Pool(e.to_string()))?;
    pool.install(|| seeds.par_iter().map(|&s| one(s)).collect())
}

/// Greedy execution of `policy` for one episode per seed.
pub fn evaluate(
    policy: &dyn Policy,
    cfg: &EnvConfig,
    map: &Arc<GridMap>,
    seeds: &[u64],
    workers: usize,
    keep_fields: bool,
) -> Result<EvalReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let traces = run_seeds(policy, cfg, map, seeds, workers, keep_fields)?;
    let per_seed = traces.iter().map(average_uncertainty).collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = mean_std(&per_seed);
    let agent_steps: usize = traces.iter().map(|t| t.steps.len() * t.config.agents).sum();
    let collisions: usize = traces.iter().map(EpisodeTrace::collisions).sum();
    Ok(EvalReport {
        policy: policy.name().to_string(),
        mean,
        std,
        per_seed,
        collision_rate: collisions as f64 / agent_steps.max(1) as f64,
        traces,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVar {
    Agents,
    SyncPeriod,
}

impl SweepVar {
    pub fn label(self) -> &'static str {
        match self {
            SweepVar::Agents => "N",
            SweepVar::SyncPeriod => "T_u",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "N" | "n" | "agents" => Some(SweepVar::Agents),
            "T_u" | "t_u" | "Tu" | "sync_period" => Some(SweepVar::SyncPeriod),
            _ => None,
        }
    }

    pub fn apply(self, cfg: &EnvConfig, value: u32) -> EnvConfig {
        let mut cfg = cfg.clone();
        match self {
            SweepVar::Agents => cfg.agents = value as usize,
            SweepVar::SyncPeriod => cfg.sync_period = value,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: u32,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    /// Mean ū divided by the number of road cells.
    pub mean_per_road_cell: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub var: SweepVar,
    pub policy: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},mean_u,std_u,seeds,mean_u_per_road_cell\n", self.var.label());
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.value, r.mean, r.std, r.seeds, r.mean_per_road_cell);
        }
        out
    }
}

/// Evaluates `policy` at every value of `var`, reusing the same seeds at
/// every point.
pub fn sweep(
    policy: &dyn Policy,
    var: SweepVar,
    values: &[u32],
    base: &EnvConfig,
    map: &Arc<GridMap>,
    seeds: &[u64],
    workers: usize,
) -> Result<SweepTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoValues);
    }
    let roads = map.road_cells().len() as f64;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let report = evaluate(policy, &var.apply(base, value), map, seeds, workers, false)?;
        rows.push(SweepRow {
            value,
            mean: report.mean,
            std: report.std,
            seeds: seeds.len(),
            mean_per_road_cell: report.mean / roads,
            per_seed: report.per_seed,
        });
    }
    Ok(SweepTable { var, policy: policy.name().to_string(), rows })
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, EvalError> {
    fs::write(&path, text).map_err(|source| EvalError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Writes `trace_<seed>.csv`, `series_<seed>.csv` and `sweep_<var>.csv`
/// files into `dir` and returns their paths.
pub fn emit_artifacts(
    traces: &[EpisodeTrace],
    tables: &[SweepTable],
    map: &GridMap,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for t in traces {
        written.push(write(dir.join(format!("trace_{}.csv", t.seed)), &t.to_csv(map))?);
        written.push(write(dir.join(format!("series_{}.csv", t.seed)), &t.series_csv())?);
    }
    for table in tables {
        written.push(write(dir.join(format!("sweep_{}.csv", table.var.label())), &table.to_csv())?);
    }
    Ok(written)
}

/// Default held-out evaluation seeds, disjoint from training episodes.
pub fn eval_seeds(master: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| crate::rng::derive_indexed(master, "eval", i)).collect()
}

/// Seeds for checkpoint selection, drawn from a stream disjoint from
/// [`eval_seeds`].
pub fn validation_seeds(master: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| crate::rng::derive_indexed(master, "validation", i)).collect()
}

/// A snapshot kept by [`Validator`].
#[derive(Clone, Debug)]
pub struct Selected {
    pub episode: usize,
    pub mean: f64,
    pub collision_rate: f64,
    pub params: QParams<f32>,
    pub adam: AdamState<f32>,
}

/// Training observer that scores the online network on validation seeds
/// after every target refresh and keeps the lowest-ū snapshot.
pub struct Validator {
    env: EnvConfig,
    map: Arc<GridMap>,
    seeds: Vec<u64>,
    best: Option<Selected>,
    history: Vec<(usize, f64, f64)>,
    error: Option<EvalError>,
}

impl Validator {
    pub fn new(env: EnvConfig, map: Arc<GridMap>, seeds: Vec<u64>) -> Result<Self, EvalError> {
        if seeds.is_empty() {
            return Err(EvalError::NoSeeds);
        }
        Ok(Self { env, map, seeds, best: None, history: Vec::new(), error: None })
    }

    pub fn best(&self) -> Option<&Selected> {
        self.best.as_ref()
    }

    /// `(episode, mean ū, collision rate)` per scored snapshot.
    pub fn history(&self) -> &[(usize, f64, f64)] {
        &self.history
    }

    /// Consumes the validator, returning the best snapshot or the first
    /// evaluation error.
    pub fn finish(self) -> Result<Option<Selected>, EvalError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.best),
        }
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("episode,mean_u,collision_rate\n");
        for (ep, mean, col) in &self.history {
            let _ = writeln!(out, "{ep},{mean:.6},{col:.6}");
        }
        out
    }
}

impl TrainObserver for Validator {
    fn on_episode(&mut self, end: &EpisodeEnd<'_>) {
        if !end.target_refreshed || self.error.is_some() {
            return;
        }
        let policy = QPolicy::new(end.params.clone());
        match evaluate(&policy, &self.env, &self.map, &self.seeds, 1, false) {
            Ok(report) => {
                let episode = end.log.episode + 1;
                self.history.push((episode, report.mean, report.collision_rate));
                if self.best.as_ref().is_none_or(|b| report.mean < b.mean) {
                    self.best = Some(Selected {
                        episode,
                        mean: report.mean,
                        collision_rate: report.collision_rate,
                        params: end.params.clone(),
                        adam: end.adam.clone(),
                    });
                }
            }
            Err(e) => self.error = Some(e),
        }
    }
}
