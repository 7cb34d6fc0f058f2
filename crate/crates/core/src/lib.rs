//! Predictive safety filter for systems whose dynamics contain a ReLU network.
//!
//! The pipeline is:
//!
//! 1. [`crown`] bounds the network between two affine functions on an ℓ∞ trust
//!    region around each step of a reference trajectory.
//! 2. The bounds are folded into a linear time-varying model with a symmetric
//!    uncertainty envelope ([`crown::extract_uncertainty`]).
//! 3. [`sls`] assembles a soft-constrained quadratic program over system responses
//!    and solves it; zero slack certifies the returned feedback policy for the horizon.
//! 4. [`psf`] wraps the above in the trust-region iteration that picks the
//!    smallest-slack solution.
//!
//! [`ilqr`] and [`pendulum`] provide the primary controllers and the benchmark plant.

pub mod crown;
pub mod dynamics;
pub mod error;
pub mod ilqr;
pub mod network;
pub mod pendulum;
pub mod psf;
pub mod sls;

pub use dynamics::LearnedModel;
pub use error::{Error, Result};
pub use network::MlpNetwork;
