//! Distributed DQN training.
//!
//! Every agent acts with the shared Q-network and stages its transitions in
//! a private buffer. At each agent/center exchange the buffers are flushed
//! into the center's replay memory, from which one minibatch update is made
//! per environment step. The target network is refreshed every `f` episodes.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, GridMap};
use crate::pomdp::{Env, EnvConfig, EnvError, Observation};
use crate::qfunction::{adam_step, argmax, AdamConfig, AdamState, NetArch, NetError, QParams, Sample, Workspace};
use crate::rng::{derive_indexed, stream, SeedTree, StreamRng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite loss at episode {episode}, step {step}\n{diagnostic}")]
    NonFiniteLoss { episode: usize, step: usize, diagnostic: String },
}

/// One (o, a, r, o') transition. Observations are shared with the next
/// transition of the same agent.
#[derive(Clone, Debug)]
pub struct Experience {
    pub obs: Arc<Observation>,
    pub action: usize,
    pub reward: f32,
    pub next_obs: Arc<Observation>,
}

/// The center's replay memory: a ring buffer with a seeded sampler.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    items: VecDeque<Experience>,
    capacity: usize,
    rng: StreamRng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity, rng: stream(seed) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// `b` distinct indices drawn uniformly; fewer if the memory is smaller.
    pub fn sample_indices(&mut self, b: usize) -> Vec<usize> {
        let b = b.min(self.items.len());
        index::sample(&mut self.rng, self.items.len(), b).into_vec()
    }

    pub fn sample(&mut self, b: usize) -> Vec<&Experience> {
        let idx = self.sample_indices(b);
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Moves every staged transition into the memory in ascending agent order
/// and empties the buffers.
pub fn flush_staging(buffers: &mut [Vec<Experience>], memory: &mut ReplayMemory) {
    for buffer in buffers.iter_mut() {
        for e in buffer.drain(..) {
            memory.push(e);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// E
    pub episodes: usize,
    /// T_ep
    pub steps_per_episode: usize,
    /// b
    pub batch_size: usize,
    pub gamma: f64,
    /// f: target refresh period in episodes.
    pub target_refresh: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episodes over which ε decays linearly.
    #[serde(default = "default_decay_fraction")]
    pub eps_decay_fraction: f64,
    pub lr: f64,
    pub replay_capacity: usize,
}

fn default_decay_fraction() -> f64 {
    0.8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            steps_per_episode: 1000,
            batch_size: 128,
            gamma: 0.99,
            target_refresh: 5,
            eps_start: 0.5,
            eps_end: 0.05,
            eps_decay_fraction: 0.8,
            lr: 1e-3,
            replay_capacity: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.episodes == 0 || self.steps_per_episode == 0 || self.batch_size == 0 {
            return bad("episodes, steps and batch size must be positive");
        }
        if self.target_refresh == 0 || self.replay_capacity == 0 {
            return bad("target refresh and replay capacity must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.eps_start) && unit(self.eps_end) && self.eps_start >= self.eps_end) {
            return bad("epsilon must decay within [0, 1]");
        }
        if !(self.eps_decay_fraction > 0.0 && self.eps_decay_fraction <= 1.0) {
            return bad("eps_decay_fraction must lie in (0, 1]");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` at episode 0 to `eps_end` at episode
/// ⌊fraction·E⌋, constant afterwards.
pub fn epsilon_schedule(episode: usize, cfg: &TrainConfig) -> f64 {
    let end = ((cfg.eps_decay_fraction * cfg.episodes as f64).floor() as usize).max(1);
    if episode >= end {
        return cfg.eps_end;
    }
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * episode as f64 / end as f64
}

/// ε-greedy: uniform with probability `eps`, otherwise the argmax with the
/// lowest index winning ties.
pub fn select_action<R: Rng>(q: &[f32], eps: f64, rng: &mut R) -> Action {
    let explore = rng.gen::<f64>() < eps;
    let i = if explore { rng.gen_range(0..Action::COUNT) } else { argmax(q) };
    Action::from_index(i).expect("action index in range")
}

/// `y = r + γ max_a' Q(o', a'; θ⁻)`. Episodes never terminate early, so every
/// sample bootstraps.
pub fn compute_targets(
    batch: &[&Experience],
    target: &QParams<f32>,
    gamma: f64,
    ws: &mut Workspace<f32>,
) -> Result<Vec<f32>, NetError> {
    let gamma = gamma as f32;
    batch
        .iter()
        .map(|e| {
            let q = target.forward_with(e.next_obs.data(), ws)?;
            let best = q.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            Ok(e.reward + gamma * best)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub net: NetArch,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Mean over steps of the per-step mean reward across agents.
    pub mean_reward: f64,
    /// Mean over steps of the true Σ_k u_k.
    pub mean_total_uncertainty: f64,
    pub epsilon: f64,
    /// Mean minibatch loss, `None` before learning starts.
    pub loss_mean: Option<f64>,
    pub updates: usize,
    pub collisions: usize,
}

impl EpisodeLog {
    pub const CSV_HEADER: &'static str = "episode,mean_reward,mean_total_uncertainty,epsilon,loss_mean";

    pub fn csv_row(&self) -> String {
        let loss = self.loss_mean.map(|l| l.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.episode, self.mean_reward, self.mean_total_uncertainty, self.epsilon, loss)
    }
}

pub fn training_log_csv(log: &[EpisodeLog]) -> String {
    let mut out = String::from(EpisodeLog::CSV_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

/// State handed to the observer after every episode.
pub struct EpisodeEnd<'a> {
    pub log: &'a EpisodeLog,
    pub params: &'a QParams<f32>,
    pub adam: &'a AdamState<f32>,
    pub target_refreshed: bool,
}

pub trait TrainObserver {
    fn on_episode(&mut self, _end: &EpisodeEnd<'_>) {}
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: QParams<f32>,
    pub target: QParams<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<EpisodeLog>,
}

fn diagnostic(params: &QParams<f32>, rewards: &[f64], memory: usize) -> String {
    let mut out = String::new();
    let max_abs = params.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let non_finite = params.data().iter().filter(|v| !v.is_finite()).count();
    let _ = writeln!(out, "  parameters: {} values, max |θ| = {max_abs}, non-finite = {non_finite}", params.len());
    let _ = writeln!(out, "  replay memory size: {memory}");
    let _ = write!(out, "  last rewards: {rewards:?}");
    out
}

/// Runs distributed DQN training.
pub fn train(
    map: Arc<GridMap>,
    setup: &TrainSetup,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    let cfg = &setup.train;
    cfg.validate()?;
    if setup.net.input_size != map.size() {
        return Err(TrainError::Config(format!(
            "network input {} does not match map size {}",
            setup.net.input_size,
            map.size()
        )));
    }
    let mut env_cfg = setup.env.clone();
    env_cfg.episode_len = cfg.steps_per_episode;
    let n = env_cfg.agents;
    let mut env = Env::new(map, env_cfg)?;

    let seeds = SeedTree::from_master(setup.seed);
    let mut params = QParams::<f32>::init(&setup.net, seeds.init)?;
    let mut target = params.clone();
    let mut adam = AdamState::for_params(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &params);
    let mut memory = ReplayMemory::new(cfg.replay_capacity, seeds.sampler);
    let mut policy_rng = stream(seeds.policy);
    let mut ws = params.workspace();
    let mut ws_target = params.workspace();
    let mut grads = vec![0.0f32; params.len()];
    let mut log = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let eps = epsilon_schedule(episode, cfg);
        let first = env.reset(derive_indexed(seeds.env, "episode", episode as u64))?;
        let mut current: Vec<Arc<Observation>> = first.into_iter().map(Arc::new).collect();
        let mut staging: Vec<Vec<Experience>> = vec![Vec::new(); n];
        let (mut reward_sum, mut u_sum, mut loss_sum) = (0.0, 0.0, 0.0);
        let (mut updates, mut collisions) = (0, 0);

        for step in 0..cfg.steps_per_episode {
            let mut actions = Vec::with_capacity(n);
            for o in &current {
                let q = params.forward_with(o.data(), &mut ws)?;
                actions.push(select_action(q, eps, &mut policy_rng));
            }
            let res = env.step(&actions)?;
            let next: Vec<Arc<Observation>> = res.observations.into_iter().map(Arc::new).collect();
            for i in 0..n {
                staging[i].push(Experience {
                    obs: Arc::clone(&current[i]),
                    action: actions[i].index(),
                    reward: res.rewards[i] as f32,
                    next_obs: Arc::clone(&next[i]),
                });
            }
            if res.info.synced {
                flush_staging(&mut staging, &mut memory);
            }

            if memory.len() >= cfg.batch_size {
                let idx = memory.sample_indices(cfg.batch_size);
                let batch: Vec<&Experience> = idx.iter().map(|&i| &memory.items[i]).collect();
                let targets = compute_targets(&batch, &target, cfg.gamma, &mut ws_target)?;
                let samples: Vec<Sample<f32>> = batch
                    .iter()
                    .zip(&targets)
                    .map(|(e, &y)| Sample { input: e.obs.data(), action: e.action, target: y })
                    .collect();
                let loss = match params.loss_and_grad(&samples, &mut grads, &mut ws) {
                    Ok(l) => l,
                    Err(NetError::Numeric(_)) => {
                        return Err(TrainError::NonFiniteLoss {
                            episode,
                            step,
                            diagnostic: diagnostic(&params, &res.rewards, memory.len()),
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
                adam_step(&mut params, &grads, &mut adam)?;
                loss_sum += f64::from(loss);
                updates += 1;
            }

            reward_sum += res.rewards.iter().sum::<f64>() / n as f64;
            u_sum += res.info.total_uncertainty;
            collisions += res.info.collided.iter().filter(|&&c| c).count();
            current = next;
        }

        let steps = cfg.steps_per_episode as f64;
        let entry = EpisodeLog {
            episode,
            mean_reward: reward_sum / steps,
            mean_total_uncertainty: u_sum / steps,
            epsilon: eps,
            loss_mean: (updates > 0).then(|| loss_sum / updates as f64),
            updates,
            collisions,
        };
        let refresh = (episode + 1) % cfg.target_refresh == 0;
        if refresh {
            target = params.clone();
        }
        observer.on_episode(&EpisodeEnd { log: &entry, params: &params, adam: &adam, target_refreshed: refresh });
        log.push(entry);
    }

    Ok(TrainOutcome { params, target, adam, log })
}
