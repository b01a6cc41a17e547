//! Gaussian-process surrogates with penalized lengthscale estimation and
//! cross-validated selection of the penalty weight.
//!
//! The pieces, bottom up:
//!
//! - [`gp`]: kernel, profile likelihood and posterior prediction;
//! - [`penalty`]: LASSO / SCAD penalties and the penalized likelihood;
//! - [`optimize`]: multistart box-constrained maximization;
//! - [`tuning`]: K-fold CV with the PE, MD, Score and DPE metrics;
//! - [`assess`]: RMSE and CRPS on held-out data;
//! - [`bench`]: test functions, Latin hypercube designs, the piston slap data;
//! - [`study`]: the experiments driven by the `gp-penalty` binary.

pub mod assess;
pub mod bench;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod optimize;
pub mod penalty;
pub mod study;
pub mod tuning;

pub use error::{Error, Result};
