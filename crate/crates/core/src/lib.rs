//! Modeling toolkit for streaming-dataflow accelerators serving a
//! Composition of Experts.
//!
//! The crate is organized bottom-up:
//!
//! - [`opgraph`]: operator graphs, FLOP/byte accounting, operational intensity
//! - [`arch`]: machine descriptions (tile, socket, node, GPU comparison platforms)
//! - [`fusion`]: partitioning graphs into spatially fused kernels
//! - [`fabric`]: placement, routing and on-chip memory mechanics
//! - [`perf`]: analytical kernel/run timing and a discrete-event oracle
//! - [`memplan`]: static HBM planning with lifetime reuse and DDR spilling
//! - [`coesim`]: expert routing, switching and LRU residency simulation

pub mod arch;
pub mod coesim;
pub mod error;
pub mod fabric;
pub mod fixtures;
pub mod fusion;
pub mod memplan;
pub mod opgraph;
pub mod perf;

pub use error::{Error, Result};
