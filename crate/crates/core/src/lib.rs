//! Particle-in-cell ground truth and a Hamiltonian normalizing-flow surrogate
//! for the one-dimensional Vlasov-Poisson system.
//!
//! The simulator ([`pic`]) produces phase-space snapshots; the flow
//! ([`flow`]) integrates a learned Hamiltonian `V(q) + a^2/2 |p|^2` with
//! leapfrog and is trained ([`train`]) by exact pull-back likelihood of the
//! final state under the known Gaussian initial density. [`eval`] measures
//! the result with sorted one-dimensional Wasserstein distances.

pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod nn;
pub mod phase;
pub mod pic;
pub mod train;

pub use error::{Error, Result};
pub use phase::{
    derive_seed, gaussian_log_density, sample_initial, sample_sigma, GaussianInitSpec, ParticleSystem, RngState,
    SnapshotSeries,
};
