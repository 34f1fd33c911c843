//! Desk-scale laboratory for gradient leakage attacks on federated learning.
//!
//! The crate simulates FL rounds in a single process, reconstructs client
//! training images from the gradients (or parameter deltas) they share, and
//! measures how well perturbation defenses hold up. Everything runs on a
//! small dense-tensor engine with reverse-mode automatic differentiation that
//! can differentiate through a gradient computation, which is what the
//! reconstruction attacks need.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats, IO and
//! the CLI live in the companion `leaklab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attack;
pub mod data;
pub mod defense;
pub mod diag;
pub mod error;
pub mod fl;
pub mod labels;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tensor, Trace, Var};
