//! Interaction-aware spatio-temporal pyramid attention.
//!
//! The crate bundles a small tape-based reverse-mode engine ([`tape`]),
//! the pyramid attention layer ([`pyramid`]), its training objective
//! ([`losses`]), an eigendecomposition oracle for the PCA view of the
//! interaction loss ([`pca`]), a synthetic video task with a toy
//! convolutional backbone ([`data`], [`model`]), a training driver
//! ([`trainer`], [`checkpoint`]) and salience visualization ([`viz`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod model;
pub mod pca;
pub mod pyramid;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tape::{Combine, Padding, Tape, Var};
pub use tensor::Tensor;
