//! Structured matrix recovery from few linear measurements.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: dense matrices, SVD, ball volumes and sphere areas.
//! * [`measurement`]: dense and rank-one measurement ensembles and their action `X -> y`.
//! * [`support`]: generators for structured support sets and box-counting dimension estimates.
//! * [`concentration`]: the single- and k-measurement small-ball bounds and their Monte-Carlo checks.
//! * [`recovery`]: decoders (finite enumeration, alternating minimization, sparse-factor
//!   support enumeration) and the injectivity probe.
//! * [`experiments`]: seeded sweeps, CSV/SVG output and run metadata.

pub mod concentration;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod measurement;
pub mod recovery;
pub mod rng;
pub mod support;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
