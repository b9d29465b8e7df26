//! Mask-based latent reconstruction as an auxiliary objective for pixel-based
//! reinforcement learning, with the agents, toy environments and evaluation
//! statistics needed to train and measure it.

pub mod agents;
pub mod decoder;
pub mod envs;
pub mod error;
pub mod eval;
pub mod mlr;
pub mod nets;
pub mod pixelops;
pub mod registry;
pub mod replay;
pub mod rng;
pub mod types;

pub use error::{MlrError, Result};
pub use types::{Action, ActionSpace, Observation, Trajectory, Transition};
