//! Matching linear appearance subspaces learned from image sets of different
//! resolutions.
//!
//! A low-resolution subspace is carried into the high-resolution image space
//! through the minimum-norm reverse of the downsampling operator and then
//! rotated, inside the span of that estimate and the operator's nullspace,
//! toward the reference subspace it is compared with.

pub mod error;
pub mod evaluation;
pub mod io;
pub mod learning;
pub mod linalg;
pub mod matching;
pub mod projection;

pub use error::{Error, ErrorKind, Result};
