//! Exact machinery for safe reinforcement learning with advantage-based
//! intervention: finite discounted MDPs with explicit unsafe meta-states,
//! intervention rules and their admissibility certificates, the absorbing
//! surrogate MDP, bundled environments and an executable bound verifier.

// `!(x > 0.0)` style guards are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod absorbing;
pub mod env;
pub mod error;
pub mod mdp;
pub mod rules;
pub mod verify;

pub use error::{Result, SailrError};
