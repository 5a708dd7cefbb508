// Validation guards are written `!(x > 0.0)` on purpose: the negated form
// rejects NaN, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulation and control toolkit for a stochastic two-component
//! granulation process.
//!
//! The crate reduces the bicomponent population balance to a closed
//! mixed-moment ODE system ([`moments`]), validates that closure against a
//! constant-number Monte Carlo simulation ([`cnmc`]), propagates
//! feed-concentration uncertainty with polynomial chaos expansions
//! ([`pce`]), and runs a chance-constrained stochastic MPC against a
//! nominal NMPC baseline ([`controller`]) in reproducible Monte Carlo
//! campaigns ([`harness`]).

pub mod cnmc;
pub mod config;
pub mod controller;
pub mod export;
pub mod harness;
pub mod moments;
pub mod optimizer;
pub mod pce;

pub use moments::{FeedSpec, KernelSpec, MomentState};
