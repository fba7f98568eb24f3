//! Next-visit imitation profiler.
//!
//! An agent learns to imitate users' next-POI visits over an environment whose
//! state fuses incrementally updated user representations with a spatial
//! knowledge graph. Pipeline stages:
//!
//! - [`ingest`]: parse check-in / taxi files, grid the city, build per-window
//!   traffic context matrices.
//! - [`spatial_kg`]: build the POI / category / zone triplet graph and train
//!   translation embeddings (TransD) to seed the graph state.
//! - [`profile_init`]: initial user vectors from each user's earliest visits.
//! - [`environment`]: the mutable state `(users, kg)` plus the gated update
//!   rules applied per visit event.
//! - [`reward`]: distance / category / exact-hit reward components, weighted
//!   (`r1`) and baseline-subtracted (`r2`) variants, baseline calibration.
//! - [`replay`]: transition memory with softmax priority sampling.
//! - [`agent`]: Q-networks (DQN / double DQN), action selection, training loop.
//! - [`evaluation`]: chronological split, greedy rollout, imitation metrics.

pub mod agent;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod math;
pub mod profile_init;
pub mod replay;
pub mod reward;
pub mod spatial_kg;

pub use error::{Error, Result};
