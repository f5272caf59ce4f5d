//! Backward-compatible embedding learning at desk scale.
//!
//! Everything here is pure computation over `alloc`: tensors and reverse-mode
//! differentiation, synthetic data, MLP models, the compatibility losses,
//! the training drivers and the retrieval evaluation protocols. File formats
//! and the command line live in the `dualtune` crate.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scenario;
pub mod train;

pub use diffcore::{Gradients, Parameter, Tape, Tensor, Var};
pub use error::{Error, Result};
