//! Seed-deterministic multi-agent network simulator for cooperative
//! self-localization and target tracking with information-seeking control.
//!
//! A network of cooperative agents (CAs) acquires noisy pairwise distance
//! measurements and runs two layers per time step:
//!
//! - an **estimation layer**: particle-based belief propagation (SPAWN
//!   schedule) over the measurement graph, with target-belief products
//!   fused across CAs by average consensus;
//! - a **control layer**: each mobile CA ascends a Monte-Carlo gradient of
//!   the negative joint posterior entropy of all next states given all next
//!   measurements, subject to a per-step displacement norm constraint.
//!
//! The crate ships three reference scenarios (`noncoop`, `coop`, `coslat`)
//! behind a CLI that emits RMSE, trajectory, and communication-cost CSV
//! files. Every random draw is derived from a counter-keyed stream, so a
//! `(config, seed)` pair reproduces a run bit-for-bit, serial or parallel.

pub mod agent;
pub mod control;
pub mod error;
pub mod estimation;
pub mod models;
pub mod netsim;
pub mod particles;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
