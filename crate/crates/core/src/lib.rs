//! Two-stream (invariant / equivariant) molecular transformer.
//!
//! This crate is `no_std` + `alloc`. It holds everything that is pure
//! computation: a small dense tensor type with a reverse-mode tape, rigid
//! motions and Gaussian basis featurization, the four attention kernels,
//! the stacked block model, a charged N-body simulator, Adam, and the
//! randomized symmetry/gradient audits. File formats, the training driver
//! and the command line live in the `geomformer` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod nbody;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{finite_diff_gradient, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
