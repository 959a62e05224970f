//! Numerical core for EBM-based dataset purification.
//!
//! Everything in this crate is a pure function over `f32` buffers: small
//! convolutional networks with hand-derived gradients, Langevin dynamics and
//! its diagnostics (trajectory distances, Lyapunov exponents), convergent
//! maximum-likelihood EBM training with a persistent image bank, poison
//! construction, the defended training pipeline, and the binary codecs for
//! checkpoints and datasets.
//!
//! The crate is `no_std` (plus `alloc`). All float math goes through `libm`
//! and all reductions run in a fixed left-to-right order, so results are
//! bitwise reproducible for a given seed regardless of platform or thread
//! schedule. File IO, threading, and the command-line front end live in the
//! companion `purekit` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod check;
pub mod codec;
pub mod defense;
pub mod ebm;
pub mod exec;
pub mod langevin;
pub mod net;
pub mod poison;
pub mod rng;
pub mod sgd;
pub mod tensor;

mod error;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
