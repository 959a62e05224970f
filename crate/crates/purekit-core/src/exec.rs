//! Work execution strategy.
//!
//! Numerical routines that fan out over independent items (one Langevin
//! chain per image, say) take an `Executor` instead of spawning threads
//! themselves; this crate stays thread-free and the std companion provides
//! a pooled implementation. The contract is strict: results are returned
//! in index order and every implementation must produce bitwise-identical
//! output to `Serial`, so a thread count is never able to change numerics.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// Evaluate `f(0..n)` and collect the results in index order.
    fn map_collect<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

/// Runs everything on the calling thread, in order. The reference
/// implementation all others must match.
#[derive(Debug, Default, Clone, Copy)]
pub struct Serial;

impl Executor for Serial {
    fn map_collect<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

// ── Tests ────────────────────────────────────────────────────────────────────
