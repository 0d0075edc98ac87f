//! Sim-to-real testbed for reinforcement-learning traffic signal control.
//!
//! Two instances of the same microsimulator, differing only in their vehicle
//! dynamics profile, stand in for the training simulator and the deployment
//! world. On top of them the crate provides a DQN signal controller and the
//! grounded action transformation stack: a forward model that predicts the
//! deployment world's next state (optionally fused with per-lane dynamics
//! estimates obtained by prompting an oracle), an inverse model trained in
//! simulation, and the training loop that grounds the policy's actions.

pub mod dqn;
pub mod env;
pub mod error;
pub mod gat;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod oracle;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
