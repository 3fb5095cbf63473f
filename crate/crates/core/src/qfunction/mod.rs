//! Convolutional Q-network with exact backpropagation, Adam and checkpoints.
//!
//! The network maps a 3×M×M observation to one value per action:
//! `Conv(4×4) + ReLU` layers (valid padding), a ReLU fully-connected layer and
//! a linear head. Everything is generic over [`Real`] so the same code runs in
//! 32-bit for training and in 64-bit for gradient checking.

mod adam;
mod arch;
mod checkpoint;
mod gradcheck;
mod network;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use arch::{ConvGeom, ConvSpec, DenseGeom, NetArch, Plan, KERNEL};
pub use checkpoint::{
    ensure_arch, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use network::{argmax, QParams, Sample, Workspace};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint architecture {found} does not match expected {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("non-finite value in checkpoint {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Floating-point element type of the network.
pub trait Real: num_traits::Float + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn to_f64(self) -> f64 {
        self
    }
}
