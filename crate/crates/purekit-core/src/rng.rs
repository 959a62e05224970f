//! Counter-based deterministic random streams.
//!
//! Every draw is a pure function of `(seed, stream_id, counter)`, so any
//! consumer can be resumed or parallelized without carrying generator state
//! beyond those three words. Streams are obtained by name: a domain label
//! plus an index (chain id, image id, training step) hash into a stream id,
//! which keeps independent parts of a run from sharing draws even when their
//! draw counts change.

use alloc::vec::Vec;

/// Weyl increment from the splitmix64 generator.
pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// splitmix64 finalizer: a bijective avalanche mix on 64 bits.
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; used to turn domain labels into stream keys.
pub const fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    hash
}

/// A positioned random stream. `counter` is the index of the next draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl Stream {
    /// Stream for `(domain, index)` under a run seed, positioned at zero.
    pub fn named(seed: u64, domain: &str, index: u64) -> Self {
        let stream_id = mix64(fnv1a64(domain.as_bytes()).wrapping_add(index.wrapping_mul(GOLDEN)));
        Stream { seed, stream_id, counter: 0 }
    }

    /// Reconstruct a stream at an explicit position.
    pub const fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        Stream { seed, stream_id, counter }
    }

    fn key(&self) -> u64 {
        mix64(mix64(self.seed).wrapping_add(self.stream_id.wrapping_mul(STREAM_SALT)))
    }

    /// The draw at an absolute position, without moving the stream.
    pub fn word(&self, counter: u64) -> u64 {
        mix64(self.key().wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.word(self.counter);
        self.counter += 1;
        w
    }

    /// Advance the counter without computing the draws.
    pub fn skip(&mut self, draws: u64) {
        self.counter += draws;
    }

    /// Uniform in [0, 1) with 24-bit resolution.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u32 << 24) as f32
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform draw below `n` (n > 0) via the multiply-shift reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// One standard-normal pair by Box-Muller; consumes exactly two draws.
    pub fn normal_pair(&mut self) -> (f32, f32) {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let t = 2.0 * core::f64::consts::PI * u2;
        ((r * libm::cos(t)) as f32, (r * libm::sin(t)) as f32)
    }

    pub fn fill_uniform(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.next_f32();
        }
    }

    /// Fill with standard normals; consumes `normal_draws(out.len())` draws.
    pub fn fill_normal(&mut self, out: &mut [f32]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let (a, b) = self.normal_pair();
            out[i] = a;
            out[i + 1] = b;
            i += 2;
        }
        if i < out.len() {
            out[i] = self.normal_pair().0;
        }
    }

    /// `m` distinct indices drawn uniformly from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, m: usize, n: usize) -> Vec<usize> {
        assert!(m <= n, "cannot draw {m} distinct indices from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        let n = xs.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.below((n - i) as u64) as usize;
            xs.swap(i, j);
        }
    }
}

/// Draws consumed by `fill_normal` over a buffer of length `len`.
pub const fn normal_draws(len: usize) -> u64 {
    (len as u64).div_ceil(2) * 2
}

// ── Tests ───────────────────────────────────────────────────────────────────
