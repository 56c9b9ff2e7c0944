//! Eco-system of specialist reinforcement-learning agents for procedurally
//! generated FourRooms gridworlds.
//!
//! New agents are created only when no pool member solves an unseen level,
//! and can be initialized from scratch, from a random pool member, from the
//! best-scoring pool member, or from a forked main agent.

pub mod cli;
pub mod ecosystem;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod plot;
pub mod policy;
pub mod ppo;
pub mod rng;

pub use ecosystem::{Agent, Pool, Strategy};
pub use error::{Error, Result};
pub use gridworld::{Action, Level, LevelConfig, Observation};
pub use harness::{ExperimentConfig, MetricsRecord};
pub use policy::PolicyParams;
pub use ppo::PpoConfig;
