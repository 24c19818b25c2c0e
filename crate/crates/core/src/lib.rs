//! Wasserstein gradient flows on particle clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`ot`]: cost matrices, Sinkhorn-Knopp scaling, barycentric projections and
//!   the debiased Sinkhorn divergence.
//! - [`velocity`]: particle estimators of the Sinkhorn, MMD and KL velocity
//!   fields, self-transport variants and both guidance schemes.
//! - [`flow`]: explicit Euler particle dynamics with trajectory recording.
//! - [`generator`]: a small MLP with hand-written reverse mode, trained to
//!   regress one flow step at a time (stop-gradient targets), AdamW and EMA.
//! - [`distributions`]: seeded samplers, analytic scores and the toy catalog.
//! - [`metrics`]: independent evaluation oracles (exact W2, MMD, coverage,
//!   moments, energy landscape slices).
//! - [`acceptance`]: the end-to-end criteria, runnable from tests or the CLI.

pub mod acceptance;
pub mod batch;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod generator;
pub mod metrics;
pub mod ot;
pub mod rng;
pub mod velocity;

pub use batch::ParticleBatch;
pub use error::{Error, Result};
