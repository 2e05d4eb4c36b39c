//! Probabilistic partial least squares (PPLS).
//!
//! A latent-variable Gaussian model for paired data matrices `X` (N×p) and
//! `Y` (N×q): `x = t W^T + e`, `y = u C^T + f`, `u = t B + h`, with
//! orthonormal loadings `W`, `C`, diagonal `B` and latent covariance, and
//! isotropic noise. The crate provides
//!
//! * maximum-likelihood estimation via a constrained EM algorithm
//!   ([`em::fit_ppls`]),
//! * canonicalization to the identifiable representative of each
//!   sign/permutation class ([`model::canonicalize_theta`]),
//! * asymptotic (observed-information) and bootstrap standard errors for
//!   the loadings ([`inference`]),
//! * a classical PLS baseline with orthogonal loadings ([`pls`]),
//! * a seeded simulation harness for bias/variance/ordering studies
//!   ([`sim`]).
//!
//! A command-line front end is available as the `ppls` binary.

pub mod em;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod pls;
pub mod sim;

pub use error::{PplsError, Result};
pub use model::{DataPair, Theta};
