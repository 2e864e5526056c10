//! Deep image prior reconstruction restricted to a sparse linear subspace of
//! network parameters.
//!
//! The crate is organised bottom-up:
//!
//! * [`operators`]: forward models (parallel-beam tomography, Gaussian blur,
//!   identity), filtered back-projection and the measurement noise model.
//! * [`network`]: a small convolutional U-Net with exact forward- and
//!   reverse-mode derivatives.
//! * [`subspace`]: pre-training, trajectory SVD (batch and incremental),
//!   leverage-score sparsification and the affine map `c -> theta_pre + MU c`.
//! * [`objective`]: the reparametrised data-fidelity + TV objective and image
//!   quality metrics.
//! * [`optim`]: natural gradient descent with a Monte-Carlo Fisher, L-BFGS,
//!   Adam and early-stopping rules.
//! * [`harness`]: phantoms, configuration, end-to-end runs and summaries.

pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod operators;
pub mod optim;
pub mod rng;
pub mod subspace;

pub use error::{Error, Result};
pub use operators::{Image, Measurement};
