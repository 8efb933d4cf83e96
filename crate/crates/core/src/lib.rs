//! Black-box variational inference with mixture variational families.
//!
//! The crate implements the mixture ELBO (MISELBO) and three estimators
//! of it, All-to-All, Some-to-All and Some-to-Some, together with:
//!
//! * exact oracles (subset enumeration, Gauss–Hermite quadrature) used to
//!   check unbiasedness and ordering of the estimators,
//! * a small reverse-mode autodiff tape and an amortized mixture encoder
//!   that shares one network across all components via one-hot inputs,
//! * a funnel-prior autoregressive-Bernoulli toy model,
//! * an Adam training loop and a timing/evaluation-count benchmark harness.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod joint;
pub mod nnet;
pub mod numerics;
pub mod oracle;
pub mod subsets;
pub mod toymodel;
pub mod training;
pub mod verify;
pub mod vfamily;

pub use error::{Error, Result};
