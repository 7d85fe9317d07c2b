//! Causal influence maximization under network diffusion.
//!
//! The crate estimates the steady-state welfare of a seed set when
//! treatment spreads over a directed graph by independent-cascade
//! diffusion, and selects seed sets that maximize it. Welfare is
//! compressed through expected exposure counts into a surrogate whose
//! error is second order in the maximum edge probability; the surrogate
//! is estimated from logged experiments with shape-constrained
//! regression and Monte-Carlo exposure simulation, and optimized by
//! greedy selection.
//!
//! Small instances can be checked exactly: [`diffusion::exact_law`]
//! enumerates every live-edge configuration, [`graph::path_constants`]
//! enumerates every feasible seed set, and [`verify`] ties the two
//! together into the invariant suites used by the `cim verify` command.

pub mod diffusion;
pub mod error;
pub mod estimand;
pub mod graph;
pub mod io;
pub mod response;
pub mod rng;
pub mod selection;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};

/// Version string written into manifests and file headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Major version of every on-disk format this crate reads and writes.
pub const FORMAT_VERSION: u32 = 1;
