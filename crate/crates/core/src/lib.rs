//! Safe-by-design reinforcement-learning traffic signal control.
//!
//! A phase graph over the intersection's legal phases decides which phases
//! may be selected at every second; the resulting action mask constrains a
//! PPO agent trained against a single-intersection microsimulator.

pub mod intersection;
pub mod phase_graph;
pub mod preset;
pub mod psych;
pub mod microsim;
pub mod ppo;
pub mod harness;
