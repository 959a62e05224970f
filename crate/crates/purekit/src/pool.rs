//! A bounded scoped-thread executor.
//!
//! Parallelism is a throughput knob, never a semantics knob: `map_collect`
//! assembles results in index order, so the output is bitwise identical to
//! the serial executor for any thread count. Work is handed out in
//! contiguous chunks, one per worker.

use std::sync::atomic::{AtomicUsize, Ordering};

use purekit_core::exec::Executor;

/// Environment variable bounding worker threads for all commands.
pub const THREADS_ENV: &str = "PUREKIT_THREADS";

#[derive(Debug, Clone, Copy)]
pub struct ThreadPool {
    threads: usize,
}

impl ThreadPool {
    pub fn new(threads: usize) -> Self {
        ThreadPool { threads: threads.max(1) }
    }

    /// Thread count from `PUREKIT_THREADS`, falling back to the machine's
    /// available parallelism. Unparseable values fall back too.
    pub fn from_env() -> Self {
        let fallback = std::thread::available_parallelism().map_or(1, |n| n.get());
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(fallback);
        ThreadPool::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

impl Executor for ThreadPool {
    fn map_collect<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        // Workers pull chunk indices from a shared counter; each chunk's
        // results keep their indices so assembly restores input order.
        let chunk = n.div_ceil(workers * 4).max(1);
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<T>> = Vec::with_capacity(n);
        slots.resize_with(n, || None);
        let slot_ptr = SendPtr(slots.as_mut_ptr());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let next = &next;
                let slot_ptr = &slot_ptr;
                scope.spawn(move || loop {
                    let start = next.fetch_add(chunk, Ordering::Relaxed);
                    if start >= n {
                        break;
                    }
                    let end = (start + chunk).min(n);
                    for i in start..end {
                        let v = f(i);
                        // Safety: each index is claimed by exactly one
                        // worker, so writes never alias.
                        unsafe { *slot_ptr.0.add(i) = Some(v) };
                    }
                });
            }
        });
        slots.into_iter().map(|v| v.expect("every index filled")).collect()
    }
}

struct SendPtr<T>(*mut Option<T>);

// Safety: the pointer is only dereferenced at disjoint indices inside the
// scope, and the backing Vec outlives the scope.
unsafe impl<T: Send> Sync for SendPtr<T> {}
unsafe impl<T: Send> Send for SendPtr<T> {}

// ── Tests ────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use purekit_core::exec::Serial;

    #[test]
    fn matches_serial_for_any_thread_count() {
        let f = |i: usize| (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xabcd;
        let expect = Serial.map_collect(1000, &f);
        for threads in [1, 2, 3, 7, 16] {
            let got = ThreadPool::new(threads).map_collect(1000, &f);
            assert_eq!(got, expect, "threads={threads}");
        }
    }

    #[test]
    fn empty_and_tiny_inputs() {
        let pool = ThreadPool::new(8);
        assert_eq!(pool.map_collect(0, &|i| i), Vec::<usize>::new());
        assert_eq!(pool.map_collect(1, &|i| i * 3), vec![0]);
        assert_eq!(pool.map_collect(2, &|i| i * 3), vec![0, 3]);
    }

    #[test]
    fn zero_thread_request_clamps_to_one() {
        assert_eq!(ThreadPool::new(0).threads(), 1);
    }
}
