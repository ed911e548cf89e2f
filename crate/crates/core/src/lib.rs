//! Distributed deep Koopman learning from partial trajectories.
//!
//! Agents on a connected graph each hold a private slice of one vessel
//! trajectory. They agree on lifted linear dynamics `{A, B, C}` through a
//! matrix-consensus iteration and on the lifting network through mixed
//! gradient steps, exchanging only model estimates. The crate also carries
//! the centralized baselines, evaluation metrics, a sampling MPC that drives
//! the vessel with the learned model, and the file formats the CLI uses.

pub mod config;
pub mod consensus;
pub mod error;
pub mod graph;
pub mod io;
pub mod koopman;
pub mod lift;
pub mod mpc;
pub mod train;
pub mod vessel;

pub use error::{Error, Result};
