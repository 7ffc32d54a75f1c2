//! Equivariant embeddings learned from unknown group actions.
//!
//! An encoder `f: X -> Z` is trained so that transformations of the inputs
//! preserve a geometric invariant of the embeddings (distances, inner
//! products, angles, or block structure), plus a barrier that keeps `f`
//! injective.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decomposition;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testing;
