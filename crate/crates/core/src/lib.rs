//! Bayesian inference over function spaces on small synthetic problems.
//!
//! The crate covers three routes to an epistemic-uncertainty field over a
//! 2-D input grid:
//!
//! * exact GP regression with classic kernels (RBF, periodic, dot product),
//! * exact GP regression with kernels induced by infinitely wide networks
//!   (NNGP layer recursion, analytic or Monte-Carlo, and the RBF-network
//!   kernel),
//! * HMC over the weights of finite-width networks, where the field is the
//!   disagreement between posterior samples.
//!
//! All randomness flows from explicit `u64` seeds through [`rng`], so every
//! result is reproducible bit for bit.

// Negated float comparisons double as NaN checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod cli;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod gp;
pub mod kernels;
pub mod rng;

pub use error::{Error, Result};
