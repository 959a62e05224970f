//! Independent gradient oracles.
//!
//! `RefNet` is a second, deliberately plain implementation of the layer
//! forward passes in f64 (per-output-element sums, no shared kernels, no
//! caching). Central finite differences over it give reference gradients
//! accurate to ~1e-10, against which the hand-derived f32 gradients in
//! `net` are verified. Keeping the reference in f64 makes the h=1e-3
//! difference quotient meaningful; an f32 forward pass would drown it in
//! rounding noise.
//!
//! Leaky-relu networks are piecewise linear, and a difference quotient whose
//! probe interval straddles an activation kink mixes two slopes: it is not an
//! estimate of the derivative on either side. Each evaluation therefore also
//! reports a hash of its activation sign pattern, and a probe is trusted only
//! when both endpoints fall in the same linear region. Untrusted coordinates
//! are skipped; comparisons assert that the skipped fraction stays small.

use alloc::vec;
use alloc::vec::Vec;

use crate::net::{Layer, NetworkParams, NetworkSpec};

/// Reference network: the spec plus f64 copies of the parameters, in the
/// same entry order as `NetworkSpec::param_layout`.
pub struct RefNet {
    pub spec: NetworkSpec,
    pub params: Vec<Vec<f64>>,
}

impl RefNet {
    pub fn new(spec: &NetworkSpec, params: &NetworkParams) -> Self {
        let params = params
            .entries
            .iter()
            .map(|e| e.tensor.data.iter().map(|&v| v as f64).collect())
            .collect();
        RefNet { spec: spec.clone(), params }
    }

    /// Evaluate the network on a flat CHW input. Panics on malformed specs;
    /// this is a test tool, not a production path.
    pub fn eval(&self, x: &[f64], shape: (usize, usize, usize)) -> Vec<f64> {
        self.eval_tagged(x, shape).0
    }

    /// `eval` plus a hash of the leaky-relu sign pattern encountered along
    /// the way. Two inputs with equal tags were processed by the same linear
    /// region of the piecewise-linear part of the network, so a difference
    /// quotient between them is exact up to the smooth head (if any).
    pub fn eval_tagged(&self, x: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, u64) {
        assert_eq!(x.len(), c * h * w, "input length disagrees with shape");
        let mut tag = 0xcbf2_9ce4_8422_2325u64;
        let mut cur = x.to_vec();
        let (mut c, mut h, mut w) = (c, h, w);
        let mut entry = 0;
        for layer in &self.spec.layers {
            match *layer {
                Layer::Conv { k, in_ch, out_ch, stride, pad } => {
                    assert_eq!(c, in_ch, "channel mismatch");
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (w + 2 * pad - k) / stride + 1;
                    let weight = &self.params[entry];
                    let bias = &self.params[entry + 1];
                    entry += 2;
                    let mut out = vec![0.0f64; out_ch * oh * ow];
                    for o in 0..out_ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[o];
                                for i in 0..in_ch {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let iy = (oy * stride + dy) as isize - pad as isize;
                                            let ix = (ox * stride + dx) as isize - pad as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xv =
                                                cur[i * h * w + iy as usize * w + ix as usize];
                                            let wv =
                                                weight[((o * in_ch + i) * k + dy) * k + dx];
                                            acc += wv * xv;
                                        }
                                    }
                                }
                                out[o * oh * ow + oy * ow + ox] = acc;
                            }
                        }
                    }
                    cur = out;
                    c = out_ch;
                    h = oh;
                    w = ow;
                }
                Layer::LeakyRelu { slope } => {
                    for v in cur.iter_mut() {
                        tag = tag
                            .wrapping_mul(0x0000_0100_0000_01B3)
                            .wrapping_add(1 + (*v > 0.0) as u64);
                        if *v <= 0.0 {
                            *v *= slope as f64;
                        }
                    }
                }
                Layer::AvgPool { k } => {
                    let (oh, ow) = (h / k, w / k);
                    let mut out = vec![0.0f64; c * oh * ow];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = 0.0f64;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        acc += cur[ch * h * w + (oy * k + dy) * w + ox * k + dx];
                                    }
                                }
                                out[ch * oh * ow + oy * ow + ox] = acc / (k * k) as f64;
                            }
                        }
                    }
                    cur = out;
                    h = oh;
                    w = ow;
                }
                Layer::Dense { input, output } => {
                    assert_eq!(cur.len(), input, "dense input mismatch");
                    let weight = &self.params[entry];
                    let bias = &self.params[entry + 1];
                    entry += 2;
                    let mut out = vec![0.0f64; output];
                    for (o, slot) in out.iter_mut().enumerate() {
                        let mut acc = bias[o];
                        for (i, &xv) in cur.iter().enumerate() {
                            acc += weight[o * input + i] * xv;
                        }
                        *slot = acc;
                    }
                    cur = out;
                    c = output;
                    h = 1;
                    w = 1;
                }
                Layer::GlobalSum => {
                    let mut out = vec![0.0f64; c];
                    for (ch, slot) in out.iter_mut().enumerate() {
                        *slot = cur[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    cur = out;
                    h = 1;
                    w = 1;
                }
            }
        }
        (cur, tag)
    }

    /// The scalar-energy objective.
    pub fn energy_obj(&self, x: &[f64], shape: (usize, usize, usize)) -> f64 {
        self.energy_obj_tagged(x, shape).0
    }

    /// The scalar-energy objective plus its linear-region tag.
    pub fn energy_obj_tagged(&self, x: &[f64], shape: (usize, usize, usize)) -> (f64, u64) {
        let (out, tag) = self.eval_tagged(x, shape);
        assert_eq!(out.len(), 1, "energy objective needs a scalar output");
        (out[0], tag)
    }

    /// Cross-entropy objective in f64.
    pub fn ce_obj(&self, x: &[f64], shape: (usize, usize, usize), label: usize) -> f64 {
        self.ce_obj_tagged(x, shape, label).0
    }

    /// Cross-entropy objective plus its linear-region tag.
    pub fn ce_obj_tagged(
        &self,
        x: &[f64],
        shape: (usize, usize, usize),
        label: usize,
    ) -> (f64, u64) {
        let (logits, tag) = self.eval_tagged(x, shape);
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = logits.iter().map(|&v| libm::exp(v - m)).sum();
        (m + libm::log(sum) - logits[label], tag)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0f64; x.len()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    grad
}

/// Central finite-difference gradient plus a per-coordinate trust mask.
///
/// The closure returns (value, linear-region tag). A coordinate is trusted
/// only when both probe endpoints carry the same tag, i.e. lie in the same
/// linear region of the piecewise-linear part of the network. A probe
/// interval that straddles a leaky-relu kink mixes two slopes, and its
/// central quotient estimates nothing; such coordinates are excluded from
/// comparison (callers assert the excluded fraction stays small).
pub fn fd_grad_checked<F: Fn(&[f64]) -> (f64, u64)>(
    f: F,
    x: &[f64],
    h: f64,
) -> (Vec<f64>, Vec<bool>) {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0f64; x.len()];
    let mut trust = vec![true; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let (up, tag_up) = f(&probe);
        probe[i] = orig - h;
        let (down, tag_down) = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
        trust[i] = tag_up == tag_down;
    }
    (grad, trust)
}

/// Central finite difference of an objective with respect to one parameter
/// coordinate of the reference net; None if the probe straddles a kink
/// (the two endpoint evaluations report different linear-region tags).
pub fn fd_param_coord<F: Fn(&RefNet) -> (f64, u64)>(
    net: &mut RefNet,
    entry: usize,
    coord: usize,
    h: f64,
    obj: F,
) -> Option<f64> {
    let orig = net.params[entry][coord];
    net.params[entry][coord] = orig + h;
    let (up, tag_up) = obj(net);
    net.params[entry][coord] = orig - h;
    let (down, tag_down) = obj(net);
    net.params[entry][coord] = orig;
    if tag_up == tag_down {
        Some((up - down) / (2.0 * h))
    } else {
        None
    }
}

/// Worst relative error of an f32 gradient against its f64 reference.
///
/// Each coordinate is measured against max(|ref_i|, 1% of the largest
/// reference magnitude, 1e-8): coordinates that are tiny relative to the
/// gradient's own scale are held to an absolute, not relative, standard.
pub fn max_rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    max_rel_err_masked(analytic, reference, &vec![true; analytic.len()]).0
}

/// `max_rel_err` restricted to trusted coordinates. Returns the worst error
/// over trusted coordinates and the fraction of coordinates that were
/// trusted; callers assert the fraction stays near 1 so a broken oracle
/// cannot silently excuse a broken gradient.
pub fn max_rel_err_masked(analytic: &[f32], reference: &[f64], trust: &[bool]) -> (f64, f64) {
    assert_eq!(analytic.len(), reference.len());
    assert_eq!(analytic.len(), trust.len());
    let peak = reference
        .iter()
        .zip(trust)
        .filter(|(_, &t)| t)
        .fold(0.0f64, |a, (&b, _)| a.max(b.abs()));
    let floor = (0.01 * peak).max(1e-8);
    let mut worst = 0.0f64;
    let mut kept = 0usize;
    for ((&a, &r), &t) in analytic.iter().zip(reference).zip(trust) {
        if !t {
            continue;
        }
        kept += 1;
        let err = (a as f64 - r).abs() / r.abs().max(floor);
        worst = worst.max(err);
    }
    (worst, kept as f64 / trust.len().max(1) as f64)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{self, NetworkSpec};
    use crate::rng::Stream;
    use crate::tensor::ImageTensor;

    #[test]
    fn fd_recovers_known_gradients() {
        // f(x) = sum x_i^2 has gradient 2x.
        let x = [0.3f64, -1.2, 2.5];
        let g = fd_grad(|v| v.iter().map(|&a| a * a).sum(), &x, 1e-4);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-7, "{gi} vs {}", 2.0 * xi);
        }
        // f(x) = sin(x0) * x1.
        let x = [0.7f64, 1.3];
        let g = fd_grad(|v| libm::sin(v[0]) * v[1], &x, 1e-4);
        assert!((g[0] - libm::cos(0.7) * 1.3).abs() < 1e-7);
        assert!((g[1] - libm::sin(0.7)).abs() < 1e-9);
    }

    #[test]
    fn reference_forward_agrees_with_production_forward() {
        // Two independent implementations evaluated on the same random nets.
        for seed in 0..3u64 {
            let spec = NetworkSpec::energy_default();
            let params = net::NetworkParams::init(&spec, seed);
            let refnet = RefNet::new(&spec, &params);
            let mut x = ImageTensor::zeros(3, 8, 8);
            Stream::named(seed, "probe", 0).fill_uniform(&mut x.data);
            let fast = net::energy(&spec, &params, &x).unwrap() as f64;
            let x64: alloc::vec::Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
            let slow = refnet.energy_obj(&x64, (3, 8, 8));
            assert!(
                (fast - slow).abs() <= 1e-4 * slow.abs().max(1.0),
                "seed {seed}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn reference_forward_agrees_for_classifier() {
        let spec = NetworkSpec::classifier_default(8, 8, 4);
        let params = net::NetworkParams::init(&spec, 5);
        let refnet = RefNet::new(&spec, &params);
        let mut x = ImageTensor::zeros(3, 8, 8);
        Stream::named(5, "probe", 1).fill_uniform(&mut x.data);
        let fast = net::classifier_forward(&spec, &params, &x).unwrap();
        let x64: alloc::vec::Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let slow = refnet.eval(&x64, (3, 8, 8));
        assert_eq!(fast.len(), slow.len());
        for (f, s) in fast.iter().zip(&slow) {
            assert!((*f as f64 - s).abs() < 1e-4, "{f} vs {s}");
        }
    }

    #[test]
    fn rel_err_floors_small_coordinates() {
        // A coordinate at 1e-12 of the peak must not dominate the error.
        let reference = [1.0f64, 1e-12];
        let analytic = [1.0f32, 2e-12];
        assert!(max_rel_err(&analytic, &reference) < 1e-6);
    }
}
