//! Desk-scale differentiable architecture search.
//!
//! The crate implements cell-based architecture search (DARTS-style
//! continuous relaxation with a one-step unrolled bilevel optimizer)
//! extended with fixed squeeze-excitation attention operations appended
//! to every cell, dual-stem network construction, genotype
//! discretization/serialization, and the data pipeline needed to run the
//! whole loop end to end on a CPU.
//!
//! Everything computes in 64-bit floats on a per-step gradient tape; runs
//! are bitwise reproducible from a seed.

pub mod arch;
pub mod bilevel;
pub mod cell;
pub mod data;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
// pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
