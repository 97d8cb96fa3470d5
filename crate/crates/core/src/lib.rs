//! Deterministic desk-scale simulator of a sensor-equipped mobility corridor.
//!
//! The pipeline runs ground-truth microscopic traffic ([`world`]) past roadside
//! sensing stations ([`stations`]), moves their object lists over modelled
//! radio and cellular links ([`netlink`]), fuses them into a live digital twin
//! ([`fusion`]), feeds connected agents ([`copilot`], [`mover`]) and finally
//! stores and mines the resulting trajectories ([`store`]). The [`harness`]
//! wires everything into seeded, reproducible experiments.

pub mod copilot;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod mover;
pub mod netlink;
pub mod rng;
pub mod stations;
pub mod store;
pub mod world;

pub use error::{Error, Result};

/// Simulation tick rate in Hz. Object-list frames share this grid.
pub const TICK_HZ: f64 = 10.0;

/// Time of tick `k` on a grid of `hz`.
///
/// Computed as a single division so that `frame_time_ms / 1000` decodes to the
/// identical `f64` for grid-aligned times.
#[inline]
pub fn grid_time(k: u64, hz: f64) -> f64 {
    k as f64 / hz
}
