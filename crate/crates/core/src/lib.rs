//! Dual normalizing flows over a shared latent space for unpaired
//! cross-domain alignment.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense tensors, reverse-mode differentiation, Adam.
//! - [`flow`]: invertible layers (affine coupling, ActNorm, shuffles).
//! - [`model`]: the two-flow model with translation, sampling and
//!   interpolation.
//! - [`objective`] and [`train`]: adversarial and likelihood losses, critics,
//!   and the alternating training loop.
//! - [`synthetic`] and [`eval`]: paired synthetic domains and metrics.
//! - [`checkpoint`], [`config`], [`io`]: persistence.
//! - [`verify`]: numeric invariant suites.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synthetic;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
