//! Asynchronous event-driven (AED) particle simulation engine.
//!
//! Particles carry their own clocks `t_i <= t` and the system jumps from one
//! predicted event to the next through an indexed priority queue. Three
//! backends share the same scheduling substrate and spatial index:
//!
//! - [`edmd`]: exact hard-sphere event-driven molecular dynamics,
//! - [`dsmc`]: stochastic collisions and the hybrid SEDMD machinery
//!   (event-driven/time-driven cell classification, time-step events,
//!   open-boundary reservoir insertion),
//! - [`fpkmc`]: first-passage kinetic Monte Carlo for diffusing and
//!   reacting particles with exactly sampled propagators.
//!
//! The [`driver`] module owns the event loop; [`config`] and [`output`]
//! provide the file-facing surface (TOML configs, line-delimited event
//! logs, binary snapshots, per-cell flow statistics).

pub mod config;
pub mod driver;
pub mod dsmc;
pub mod edmd;
pub mod ensemble;
pub mod events;
pub mod fpkmc;
pub mod model;
pub mod nnl;
pub mod output;
pub mod rng;
pub mod setup;
pub mod spatial;
pub mod stats;
pub mod vecmath;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Rejected configuration; message names the violated constraint.
    #[error("config error: {0}")]
    Config(String),
    /// Broken internal invariant (programming error). Debug builds abort
    /// at the detection site instead of returning this.
    #[error("invariant fault: {0}")]
    Fault(String),
    #[error("causality fault: event time {event} precedes clock {clock}")]
    Causality { event: f64, clock: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn fault(msg: impl Into<String>) -> Self {
        let msg = msg.into();
        debug_assert!(false, "invariant fault: {msg}");
        Error::Fault(msg)
    }
}
