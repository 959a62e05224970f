//! Stochastic gradient descent with classical momentum and weight decay.
//!
//! The update is the standard one: decay is folded into the gradient, the
//! velocity is an exponential accumulation of decayed gradients, and the
//! parameters move against the velocity:
//!
//!   g = grad + wd * p
//!   v = momentum * v + g
//!   p = p - lr * v
//!
//! With momentum 0 and wd 0 this reduces to plain SGD, which is what the
//! energy model trainer uses; the classifier uses momentum 0.9 and wd 5e-4.

use alloc::vec;
use alloc::vec::Vec;

use crate::net::NetworkParams;

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn plain(lr: f32) -> Self {
        SgdConfig { lr, momentum: 0.0, weight_decay: 0.0 }
    }
}

// ── State ────────────────────────────────────────────────────────────────────

/// Per-entry velocity buffers, in the same entry order as the parameters
/// they update. Starts at zero.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(params: &NetworkParams) -> Self {
        let velocity = params.entries.iter().map(|e| vec![0.0f32; e.tensor.numel()]).collect();
        SgdState { velocity }
    }

    /// Apply one update in place. Entry shapes must match the state; the
    /// caller guarantees both came from the same layout.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, cfg: &SgdConfig) {
        assert_eq!(params.entries.len(), self.velocity.len(), "state/param entry count");
        assert_eq!(params.entries.len(), grads.entries.len(), "grad/param entry count");
        for ((p, g), v) in
            params.entries.iter_mut().zip(&grads.entries).zip(self.velocity.iter_mut())
        {
            debug_assert_eq!(p.name, g.name);
            assert_eq!(p.tensor.data.len(), v.len(), "velocity length");
            assert_eq!(p.tensor.data.len(), g.tensor.data.len(), "gradient length");
            for ((pv, &gv), vv) in p.tensor.data.iter_mut().zip(&g.tensor.data).zip(v.iter_mut()) {
                let decayed = gv + cfg.weight_decay * *pv;
                *vv = cfg.momentum * *vv + decayed;
                *pv -= cfg.lr * *vv;
            }
        }
    }
}

// ── Tests ────────────────────────────────────────────────────────────────────
