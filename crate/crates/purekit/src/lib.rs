//! Host-side companion to `purekit-core`: file formats on disk, run
//! configuration, dataset construction, threaded execution, and the
//! command-line pipeline built from them.

pub mod config;
pub mod csvout;
pub mod data;
pub mod io;
pub mod pool;

pub use purekit_core as core;
