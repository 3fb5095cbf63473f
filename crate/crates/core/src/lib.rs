//! Multi-agent road-network traffic monitoring.
//!
//! A team of aerial agents moves on a grid laid over a road network and tries
//! to keep the uncertainty about traffic conditions low. The crate provides
//!
//! - [`gridworld`]: the static map, agent kinematics and collision-aware move
//!   resolution,
//! - [`uncertainty`]: event processes, last-visit clocks, the two uncertainty
//!   models and the periodic agent/center synchronization protocol,
//! - [`pomdp`]: the environment facade (reset/step, observations, rewards),
//! - [`qfunction`]: a small convolutional Q-network with hand-written
//!   backpropagation, Adam and portable checkpoints,
//! - [`trainer`]: distributed DQN with per-agent staging buffers and a shared
//!   replay memory,
//! - [`evalkit`]: metrics, baseline policies, evaluation and sweeps,
//! - [`config`]: declarative run configuration.

pub mod config;
pub mod evalkit;
pub mod gridworld;
pub mod pomdp;
pub mod qfunction;
pub mod rng;
pub mod trainer;
pub mod uncertainty;

/// Discrete simulation time, in steps. Signed so that randomized initial
/// clocks can place the last visit before the episode start.
pub type Timestep = i64;

/// Text of the shipped 10×10 desk-scale map.
pub const SYNTHETIC10_MAP: &str = include_str!("../../../maps/synthetic10.map");
/// Text of the shipped 30×30 downtown approximation.
pub const TORONTO30_MAP: &str = include_str!("../../../maps/toronto30.map");
