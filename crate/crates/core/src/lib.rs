//! Preconditioned gradient dynamics for over-parameterized least squares.
//!
//! The crate splits iterates `w(t)` of the update
//! `w(t+1) = w(t) - eta * D(t) * grad f(w(t))` into the component inside the
//! row space of the data matrix and the component in its null space, using a
//! completed singular value decomposition of `X`. On top of that it provides
//! closed-form trajectory evaluators, fixed-point predictors, decay-rate
//! estimation for preconditioner classification, and the synthetic data
//! generators used to compare gradient descent with adaptive methods.
//!
//! Everything here is `no_std` with `alloc`. File formats, configuration and
//! the command-line front-end live in the `precond-cli` crate.

#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod dynamics;
mod error;
pub mod experiments;
pub mod linalg;
pub mod precond;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::Matrix;
