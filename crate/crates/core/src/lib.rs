//! Dual-granularity offline Q-learning: coarse critics over action categories
//! guiding fine critics over concrete actions, with exact tabular oracles.

pub mod data;
pub mod envs;
pub mod error;
pub mod harness;
pub mod improve;
pub mod mdp;
pub mod par;
pub mod qlearn;
pub mod rewards;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
