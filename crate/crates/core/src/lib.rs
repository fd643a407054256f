//! Measurement-driven preparation of molecular ion quantum states.
//!
//! Pulse transition matrices are compiled from interaction-picture propagation,
//! projective motional measurements and thermal radiation are modelled as a
//! (quantum) Markov decision process, and a deep-Q agent learns pulse sequences.

pub mod agent;
pub mod analysis;
pub mod archive;
pub mod config;
pub mod constants;
pub mod env;
pub mod error;
pub mod levels;
pub mod presets;
pub mod propagator;
pub mod pulses;
pub mod rng;
pub mod thermal;
pub mod workflow;

pub use error::{Error, Result};
