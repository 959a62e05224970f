//! Small convolutional networks with hand-derived gradients.
//!
//! Two fixed architectures are provided: a scalar-output energy network and a
//! logit-output classifier. Both are described by a `NetworkSpec` (a flat
//! layer list), so either can be swapped without touching the evaluation
//! engine. Gradients are derived per layer type with respect to both inputs
//! (for Langevin sampling and trigger crafting) and parameters (for
//! training); there is no general autodiff.
//!
//! Every reduction runs in a fixed left-to-right order, so forward and
//! backward passes are bitwise deterministic for given inputs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{fnv1a64, Stream};
use crate::tensor::{ImageTensor, NamedTensor, Tensor};
use crate::{Error, Result};

/// Slope shared by every leaky-relu in the default architectures; nonzero so
/// Langevin input gradients never vanish.
pub const LEAKY_SLOPE: f32 = 0.05;

/// Standard deviation of the N(0, sigma^2) parameter initialization.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    Conv { k: usize, in_ch: usize, out_ch: usize, stride: usize, pad: usize },
    LeakyRelu { slope: f32 },
    AvgPool { k: usize },
    Dense { input: usize, output: usize },
    /// Spatial sum per channel; collapses (C, H, W) to a length-C vector.
    GlobalSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// The energy architecture: three convolutions to a per-channel spatial
    /// sum, then a dense head producing one scalar. Input-size agnostic.
    pub fn energy_default() -> Self {
        NetworkSpec {
            layers: vec![
                Layer::Conv { k: 3, in_ch: 3, out_ch: 32, stride: 1, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::Conv { k: 3, in_ch: 32, out_ch: 64, stride: 2, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::Conv { k: 3, in_ch: 64, out_ch: 64, stride: 2, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::GlobalSum,
                Layer::Dense { input: 64, output: 1 },
            ],
        }
    }

    /// The downstream classifier for 3-channel `h` x `w` inputs. Both spatial
    /// dimensions must be divisible by 4 (two 2x2 poolings).
    pub fn classifier_default(h: usize, w: usize, classes: usize) -> Self {
        NetworkSpec {
            layers: vec![
                Layer::Conv { k: 3, in_ch: 3, out_ch: 16, stride: 1, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::AvgPool { k: 2 },
                Layer::Conv { k: 3, in_ch: 16, out_ch: 32, stride: 1, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::AvgPool { k: 2 },
                Layer::Dense { input: 32 * (h / 4) * (w / 4), output: classes },
            ],
        }
    }

    /// Ordered parameter names and shapes; the canonical layout for
    /// initialization, checkpoints, and gradient containers.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { k, in_ch, out_ch, .. } => {
                    out.push((format!("layer{i}.weight"), vec![out_ch, in_ch, k, k]));
                    out.push((format!("layer{i}.bias"), vec![out_ch]));
                }
                Layer::Dense { input, output } => {
                    out.push((format!("layer{i}.weight"), vec![output, input]));
                    out.push((format!("layer{i}.bias"), vec![output]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Shape after every layer for a (c, h, w) input, validating the chain.
    /// Element 0 is the input shape itself; flat vectors appear as (n, 1, 1).
    pub fn stage_shapes(&self, c: usize, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(c, h, w)];
        let (mut c, mut h, mut w) = (c, h, w);
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { k, in_ch, out_ch, stride, pad } => {
                    if c != in_ch {
                        return Err(Error::ShapeMismatch {
                            expected: (in_ch, h, w),
                            actual: (c, h, w),
                        });
                    }
                    if stride == 0 || k == 0 {
                        return Err(Error::BadSpec(format!("layer {i}: zero stride or kernel")));
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return Err(Error::BadSpec(format!(
                            "layer {i}: kernel {k} exceeds padded input {h}x{w}"
                        )));
                    }
                    c = out_ch;
                    h = (h + 2 * pad - k) / stride + 1;
                    w = (w + 2 * pad - k) / stride + 1;
                }
                Layer::LeakyRelu { .. } => {}
                Layer::AvgPool { k } => {
                    if k == 0 || h % k != 0 || w % k != 0 {
                        return Err(Error::BadSpec(format!(
                            "layer {i}: pool {k} does not divide {h}x{w}"
                        )));
                    }
                    h /= k;
                    w /= k;
                }
                Layer::Dense { input, output } => {
                    let flat = c * h * w;
                    if flat != input {
                        return Err(Error::DataLength { expected: input, actual: flat });
                    }
                    c = output;
                    h = 1;
                    w = 1;
                }
                Layer::GlobalSum => {
                    h = 1;
                    w = 1;
                }
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    pub fn output_len(&self, c: usize, h: usize, w: usize) -> Result<usize> {
        let shapes = self.stage_shapes(c, h, w)?;
        let (c, h, w) = shapes[shapes.len() - 1];
        Ok(c * h * w)
    }

    /// Entry indices (weight, bias) per layer, None for parameterless layers.
    fn entry_map(&self) -> Vec<Option<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut next = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv { .. } | Layer::Dense { .. } => {
                    out.push(Some((next, next + 1)));
                    next += 2;
                }
                _ => out.push(None),
            }
        }
        out
    }
}

/// Ordered named parameter arrays for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub entries: Vec<NamedTensor>,
}

impl NetworkParams {
    /// Fresh parameters drawn from N(0, INIT_STD^2). Each entry gets its own
    /// stream named by the entry name, so adding a layer does not shift the
    /// draws of the others.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut entries = Vec::new();
        for (name, shape) in spec.param_layout() {
            let mut t = Tensor::zeros(&shape);
            let mut stream = Stream::named(seed, "init", fnv1a64(name.as_bytes()));
            stream.fill_normal(&mut t.data);
            for v in t.data.iter_mut() {
                *v *= INIT_STD;
            }
            entries.push(NamedTensor { name, tensor: t });
        }
        NetworkParams { entries }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape)| NamedTensor { name, tensor: Tensor::zeros(&shape) })
            .collect();
        NetworkParams { entries }
    }

    /// Error unless entry names and shapes match the spec's layout exactly.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.entries.len() {
            return Err(Error::BadSpec(format!(
                "expected {} parameter entries, got {}",
                layout.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), entry) in layout.iter().zip(&self.entries) {
            if name != &entry.name || shape != &entry.tensor.shape {
                return Err(Error::BadSpec(format!(
                    "parameter entry mismatch: expected {name} {shape:?}, got {} {:?}",
                    entry.name, entry.tensor.shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Euclidean norm over all entries, reduced in entry order.
    pub fn l2_norm(&self) -> f32 {
        let mut acc = 0.0f32;
        for e in &self.entries {
            for &v in &e.tensor.data {
                acc += v * v;
            }
        }
        libm::sqrtf(acc)
    }

    /// self += scale * other, entrywise. Shapes must already agree.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f32) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(a.tensor.shape, b.tensor.shape);
            for (x, y) in a.tensor.data.iter_mut().zip(&b.tensor.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, scale: f32) {
        for e in self.entries.iter_mut() {
            for v in e.tensor.data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

// ── Layer kernels ───────────────────────────────────────────────────────────

/// Output-index range [lo, hi) for which `out*stride + d - pad` lands inside
/// `[0, span)`; empty ranges come back as lo >= hi.
fn valid_range(span: usize, span_out: usize, d: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > d { (pad - d).div_ceil(stride) } else { 0 };
    let num = span as isize - 1 + pad as isize - d as isize;
    let hi = if num < 0 { 0 } else { span_out.min(num as usize / stride + 1) };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f32],
    (ci, h, w): (usize, usize, usize),
    weight: &[f32],
    bias: &[f32],
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f32],
    (co, oh, ow): (usize, usize, usize),
) {
    for o in 0..co {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
    }
    for o in 0..co {
        let out_plane = o * oh * ow;
        for i in 0..ci {
            let in_plane = i * h * w;
            let w_base = ((o * ci) + i) * k * k;
            for dy in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, oh, dy, stride, pad);
                for dx in 0..k {
                    let wv = weight[w_base + dy * k + dx];
                    let (ox_lo, ox_hi) = valid_range(w, ow, dx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + dy - pad;
                        let in_row = in_plane + iy * w + dx;
                        let out_row = out_plane + oy * ow;
                        for ox in ox_lo..ox_hi {
                            out[out_row + ox] += wv * input[in_row + ox * stride - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    dout: &[f32],
    (co, oh, ow): (usize, usize, usize),
    weight: &[f32],
    k: usize,
    stride: usize,
    pad: usize,
    din: &mut [f32],
    (ci, h, w): (usize, usize, usize),
) {
    for o in 0..co {
        let out_plane = o * oh * ow;
        for i in 0..ci {
            let in_plane = i * h * w;
            let w_base = ((o * ci) + i) * k * k;
            for dy in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, oh, dy, stride, pad);
                for dx in 0..k {
                    let wv = weight[w_base + dy * k + dx];
                    let (ox_lo, ox_hi) = valid_range(w, ow, dx, stride, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + dy - pad;
                        let in_row = in_plane + iy * w + dx;
                        let out_row = out_plane + oy * ow;
                        for ox in ox_lo..ox_hi {
                            din[in_row + ox * stride - pad] += wv * dout[out_row + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_params(
    dout: &[f32],
    (co, oh, ow): (usize, usize, usize),
    input: &[f32],
    (ci, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
) {
    for o in 0..co {
        let out_plane = o * oh * ow;
        let mut acc = 0.0f32;
        for &v in &dout[out_plane..out_plane + oh * ow] {
            acc += v;
        }
        dbias[o] += acc;
        for i in 0..ci {
            let in_plane = i * h * w;
            let w_base = ((o * ci) + i) * k * k;
            for dy in 0..k {
                let (oy_lo, oy_hi) = valid_range(h, oh, dy, stride, pad);
                for dx in 0..k {
                    let (ox_lo, ox_hi) = valid_range(w, ow, dx, stride, pad);
                    let mut acc = 0.0f32;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + dy - pad;
                        let in_row = in_plane + iy * w + dx;
                        let out_row = out_plane + oy * ow;
                        for ox in ox_lo..ox_hi {
                            acc += dout[out_row + ox] * input[in_row + ox * stride - pad];
                        }
                    }
                    dweight[w_base + dy * k + dx] += acc;
                }
            }
        }
    }
}

// ── Forward / backward engine ───────────────────────────────────────────────

struct ForwardPass {
    /// stages[0] is the input; stages[i] the output of layer i-1.
    stages: Vec<Vec<f32>>,
    shapes: Vec<(usize, usize, usize)>,
}

fn forward_pass(spec: &NetworkSpec, params: &NetworkParams, x: &ImageTensor) -> Result<ForwardPass> {
    params.validate(spec)?;
    let shapes = spec.stage_shapes(x.c, x.h, x.w)?;
    let entry_map = spec.entry_map();
    let mut stages: Vec<Vec<f32>> = Vec::with_capacity(spec.layers.len() + 1);
    stages.push(x.data.clone());
    for (li, layer) in spec.layers.iter().enumerate() {
        let (ci, hi, wi) = shapes[li];
        let (co, ho, wo) = shapes[li + 1];
        let cur = &stages[li];
        let mut out = vec![0.0f32; co * ho * wo];
        match *layer {
            Layer::Conv { k, stride, pad, .. } => {
                let (wi_idx, bi_idx) = entry_map[li].unwrap();
                conv_forward(
                    cur,
                    (ci, hi, wi),
                    &params.entries[wi_idx].tensor.data,
                    &params.entries[bi_idx].tensor.data,
                    k,
                    stride,
                    pad,
                    &mut out,
                    (co, ho, wo),
                );
            }
            Layer::LeakyRelu { slope } => {
                for (o, &v) in out.iter_mut().zip(cur.iter()) {
                    *o = if v > 0.0 { v } else { slope * v };
                }
            }
            Layer::AvgPool { k } => {
                let inv = 1.0 / (k * k) as f32;
                for ch in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0f32;
                            for dy in 0..k {
                                let base = ch * hi * wi + (oy * k + dy) * wi + ox * k;
                                for dx in 0..k {
                                    acc += cur[base + dx];
                                }
                            }
                            out[ch * ho * wo + oy * wo + ox] = acc * inv;
                        }
                    }
                }
            }
            Layer::Dense { input, output } => {
                let (wi_idx, bi_idx) = entry_map[li].unwrap();
                let wt = &params.entries[wi_idx].tensor.data;
                let bias = &params.entries[bi_idx].tensor.data;
                for o in 0..output {
                    let row = &wt[o * input..(o + 1) * input];
                    let mut acc = bias[o];
                    for (wv, xv) in row.iter().zip(cur.iter()) {
                        acc += wv * xv;
                    }
                    out[o] = acc;
                }
            }
            Layer::GlobalSum => {
                for ch in 0..co {
                    let mut acc = 0.0f32;
                    for &v in &cur[ch * hi * wi..(ch + 1) * hi * wi] {
                        acc += v;
                    }
                    out[ch] = acc;
                }
            }
        }
        stages.push(out);
    }
    Ok(ForwardPass { stages, shapes })
}

/// Walk the layers in reverse from an output cotangent; returns the input
/// gradient and, when `param_grads` is given, accumulates parameter gradients
/// into it (so batches can share one accumulator).
fn backward_pass(
    spec: &NetworkSpec,
    params: &NetworkParams,
    pass: &ForwardPass,
    dout: Vec<f32>,
    mut param_grads: Option<&mut NetworkParams>,
) -> Vec<f32> {
    let entry_map = spec.entry_map();
    let mut dcur = dout;
    for (li, layer) in spec.layers.iter().enumerate().rev() {
        let (ci, hi, wi) = pass.shapes[li];
        let (co, ho, wo) = pass.shapes[li + 1];
        let below = &pass.stages[li];
        let mut dprev = vec![0.0f32; ci * hi * wi];
        match *layer {
            Layer::Conv { k, stride, pad, .. } => {
                let (wi_idx, bi_idx) = entry_map[li].unwrap();
                if let Some(grads) = param_grads.as_deref_mut() {
                    let (wslot, rest) = {
                        // Two disjoint entries of the same container.
                        let (a, b) = grads.entries.split_at_mut(bi_idx);
                        (&mut a[wi_idx].tensor.data, &mut b[0].tensor.data)
                    };
                    conv_backward_params(
                        &dcur,
                        (co, ho, wo),
                        below,
                        (ci, hi, wi),
                        k,
                        stride,
                        pad,
                        wslot,
                        rest,
                    );
                }
                conv_backward_input(
                    &dcur,
                    (co, ho, wo),
                    &params.entries[wi_idx].tensor.data,
                    k,
                    stride,
                    pad,
                    &mut dprev,
                    (ci, hi, wi),
                );
            }
            Layer::LeakyRelu { slope } => {
                for ((dp, &v), &dv) in dprev.iter_mut().zip(below.iter()).zip(dcur.iter()) {
                    *dp = if v > 0.0 { dv } else { slope * dv };
                }
            }
            Layer::AvgPool { k } => {
                let inv = 1.0 / (k * k) as f32;
                for ch in 0..co {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let share = dcur[ch * ho * wo + oy * wo + ox] * inv;
                            for dy in 0..k {
                                let base = ch * hi * wi + (oy * k + dy) * wi + ox * k;
                                for dx in 0..k {
                                    dprev[base + dx] += share;
                                }
                            }
                        }
                    }
                }
            }
            Layer::Dense { input, output } => {
                let (wi_idx, bi_idx) = entry_map[li].unwrap();
                let wt = &params.entries[wi_idx].tensor.data;
                if let Some(grads) = param_grads.as_deref_mut() {
                    {
                        let dw = &mut grads.entries[wi_idx].tensor.data;
                        for o in 0..output {
                            let dv = dcur[o];
                            let row = &mut dw[o * input..(o + 1) * input];
                            for (slot, &xv) in row.iter_mut().zip(below.iter()) {
                                *slot += dv * xv;
                            }
                        }
                    }
                    let db = &mut grads.entries[bi_idx].tensor.data;
                    for o in 0..output {
                        db[o] += dcur[o];
                    }
                }
                for o in 0..output {
                    let dv = dcur[o];
                    let row = &wt[o * input..(o + 1) * input];
                    for (slot, &wv) in dprev.iter_mut().zip(row.iter()) {
                        *slot += dv * wv;
                    }
                }
            }
            Layer::GlobalSum => {
                for ch in 0..ci {
                    let dv = dcur[ch];
                    for slot in &mut dprev[ch * hi * wi..(ch + 1) * hi * wi] {
                        *slot += dv;
                    }
                }
            }
        }
        dcur = dprev;
    }
    dcur
}

// ── Public operations ───────────────────────────────────────────────────────

/// Scalar energy of one image.
pub fn energy(spec: &NetworkSpec, params: &NetworkParams, x: &ImageTensor) -> Result<f32> {
    let pass = forward_pass(spec, params, x)?;
    let out = &pass.stages[pass.stages.len() - 1];
    if out.len() != 1 {
        return Err(Error::BadSpec(format!("energy architecture emits {} values", out.len())));
    }
    Ok(out[0])
}

/// Gradient of the energy with respect to the image.
pub fn energy_input_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &ImageTensor,
) -> Result<ImageTensor> {
    let pass = forward_pass(spec, params, x)?;
    if pass.stages[pass.stages.len() - 1].len() != 1 {
        return Err(Error::BadSpec("energy architecture emits more than one value".into()));
    }
    let grad = backward_pass(spec, params, &pass, vec![1.0], None);
    ImageTensor::from_vec(x.c, x.h, x.w, grad)
}

/// Mean parameter gradient of the energy over a batch, with the mean energy.
pub fn energy_param_grad_with_mean(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[ImageTensor],
) -> Result<(NetworkParams, f32)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("energy gradient batch"));
    }
    let mut grads = NetworkParams::zeros(spec);
    let mut esum = 0.0f32;
    for x in batch {
        let pass = forward_pass(spec, params, x)?;
        let out = &pass.stages[pass.stages.len() - 1];
        if out.len() != 1 {
            return Err(Error::BadSpec(format!("energy architecture emits {} values", out.len())));
        }
        esum += out[0];
        backward_pass(spec, params, &pass, vec![1.0], Some(&mut grads));
    }
    let inv = 1.0 / batch.len() as f32;
    grads.scale(inv);
    Ok((grads, esum * inv))
}

/// Mean parameter gradient of the energy over a batch.
pub fn energy_param_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[ImageTensor],
) -> Result<NetworkParams> {
    energy_param_grad_with_mean(spec, params, batch).map(|(g, _)| g)
}

/// Logits of the classifier for one image.
pub fn classifier_forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &ImageTensor,
) -> Result<Vec<f32>> {
    let pass = forward_pass(spec, params, x)?;
    Ok(pass.stages[pass.stages.len() - 1].clone())
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut m = f32::NEG_INFINITY;
    for &v in logits {
        m = m.max(v);
    }
    let mut exps: Vec<f32> = logits.iter().map(|&v| libm::expf(v - m)).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    let inv = 1.0 / sum;
    for e in exps.iter_mut() {
        *e *= inv;
    }
    exps
}

pub fn ce_from_logits(logits: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let mut m = f32::NEG_INFINITY;
    for &v in logits {
        m = m.max(v);
    }
    let mut sum = 0.0f32;
    for &v in logits {
        sum += libm::expf(v - m);
    }
    let lse = m + libm::logf(sum);
    let loss = lse - logits[label];
    let mut dlogits = softmax(logits);
    dlogits[label] -= 1.0;
    Ok((loss, dlogits))
}

/// Cross-entropy loss and mean-free parameter gradients for one example.
pub fn classifier_backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &ImageTensor,
    label: usize,
) -> Result<(f32, NetworkParams)> {
    let pass = forward_pass(spec, params, x)?;
    let logits = &pass.stages[pass.stages.len() - 1];
    let (loss, dlogits) = ce_from_logits(logits, label)?;
    let mut grads = NetworkParams::zeros(spec);
    backward_pass(spec, params, &pass, dlogits, Some(&mut grads));
    Ok((loss, grads))
}

/// Cross-entropy loss and its gradient with respect to the image (used for
/// trigger crafting).
pub fn classifier_input_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &ImageTensor,
    label: usize,
) -> Result<(f32, ImageTensor)> {
    let pass = forward_pass(spec, params, x)?;
    let logits = &pass.stages[pass.stages.len() - 1];
    let (loss, dlogits) = ce_from_logits(logits, label)?;
    let grad = backward_pass(spec, params, &pass, dlogits, None);
    Ok((loss, ImageTensor::from_vec(x.c, x.h, x.w, grad)?))
}

// ── Energy abstractions for the dynamics modules ────────────────────────────

/// Anything Langevin dynamics can sample against.
pub trait EnergyFn: Sync {
    fn energy(&self, x: &ImageTensor) -> Result<f32>;
    fn input_grad(&self, x: &ImageTensor) -> Result<ImageTensor>;
}

/// A network spec with its parameters: the trained object the pipeline moves
/// around.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
}

impl Model {
    pub fn new(spec: NetworkSpec, params: NetworkParams) -> Result<Self> {
        params.validate(&spec)?;
        Ok(Model { spec, params })
    }
}

impl EnergyFn for Model {
    fn energy(&self, x: &ImageTensor) -> Result<f32> {
        energy(&self.spec, &self.params, x)
    }

    fn input_grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        energy_input_grad(&self.spec, &self.params, x)
    }
}

/// G(x) = a/2 * ||x||^2; the analytic surrogate behind the stationarity and
/// Lyapunov oracles.
#[derive(Clone, Copy, Debug)]
pub struct Quadratic {
    pub a: f32,
}

impl EnergyFn for Quadratic {
    fn energy(&self, x: &ImageTensor) -> Result<f32> {
        let mut acc = 0.0f32;
        for &v in &x.data {
            acc += v * v;
        }
        Ok(0.5 * self.a * acc)
    }

    fn input_grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let data = x.data.iter().map(|&v| self.a * v).collect();
        ImageTensor::from_vec(x.c, x.h, x.w, data)
    }
}

/// G(x) = 0 everywhere; Langevin on this model is a pure random walk.
#[derive(Clone, Copy, Debug)]
pub struct ZeroEnergy;

impl EnergyFn for ZeroEnergy {
    fn energy(&self, _x: &ImageTensor) -> Result<f32> {
        Ok(0.0)
    }

    fn input_grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(ImageTensor::zeros(x.c, x.h, x.w))
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_grad_checked, fd_param_coord, max_rel_err_masked, RefNet};
    use crate::rng::Stream;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
        let mut x = ImageTensor::zeros(c, h, w);
        Stream::named(seed, "img", 0).fill_uniform(&mut x.data);
        x
    }

    fn to_f64(x: &ImageTensor) -> Vec<f64> {
        x.data.iter().map(|&v| v as f64).collect()
    }

    /// A small energy net with few enough parameters to sweep exhaustively.
    fn tiny_energy_spec() -> NetworkSpec {
        NetworkSpec {
            layers: vec![
                Layer::Conv { k: 3, in_ch: 2, out_ch: 4, stride: 2, pad: 1 },
                Layer::LeakyRelu { slope: LEAKY_SLOPE },
                Layer::GlobalSum,
                Layer::Dense { input: 4, output: 1 },
            ],
        }
    }

    #[test]
    fn zero_params_give_zero_energy_and_gradient() {
        let spec = NetworkSpec::energy_default();
        let params = NetworkParams::zeros(&spec);
        let x = random_image(1, 3, 8, 8);
        assert_eq!(energy(&spec, &params, &x).unwrap(), 0.0);
        let g = energy_input_grad(&spec, &params, &x).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_is_deterministic_across_calls() {
        let spec = NetworkSpec::energy_default();
        let params = NetworkParams::init(&spec, 3);
        let x = random_image(2, 3, 8, 8);
        let a = energy(&spec, &params, &x).unwrap();
        let b = energy(&spec, &params, &x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn single_dense_energy_is_a_dot_product() {
        let spec = NetworkSpec { layers: vec![Layer::Dense { input: 4, output: 1 }] };
        let mut params = NetworkParams::zeros(&spec);
        params.entries[0].tensor.data = vec![1.0, -2.0, 3.0, 0.5];
        params.entries[1].tensor.data = vec![0.25];
        let x = ImageTensor::from_vec(4, 1, 1, vec![2.0, 1.0, 0.0, -4.0]).unwrap();
        // 1*2 - 2*1 + 3*0 + 0.5*(-4) + 0.25 = -1.75, computed by hand.
        assert_eq!(energy(&spec, &params, &x).unwrap(), -1.75);
        // d/dx is the weight row; d/dw is x itself.
        let gx = energy_input_grad(&spec, &params, &x).unwrap();
        assert_eq!(gx.data, vec![1.0, -2.0, 3.0, 0.5]);
        let gp = energy_param_grad(&spec, &params, core::slice::from_ref(&x)).unwrap();
        assert_eq!(gp.entries[0].tensor.data, vec![2.0, 1.0, 0.0, -4.0]);
        assert_eq!(gp.entries[1].tensor.data, vec![1.0]);
    }

    #[test]
    fn energy_input_grad_matches_finite_differences() {
        let spec = NetworkSpec::energy_default();
        for seed in 0..4u64 {
            let params = NetworkParams::init(&spec, seed);
            let x = random_image(seed + 10, 3, 8, 8);
            let analytic = energy_input_grad(&spec, &params, &x).unwrap();
            let refnet = RefNet::new(&spec, &params);
            let (numeric, trust) =
                fd_grad_checked(|v| refnet.energy_obj_tagged(v, (3, 8, 8)), &to_f64(&x), 1e-3);
            let (err, kept) = max_rel_err_masked(&analytic.data, &numeric, &trust);
            assert!(kept > 0.85, "seed {seed}: only {kept} of coordinates trusted");
            assert!(err < 1e-3, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn tiny_net_param_grad_matches_finite_differences_exhaustively() {
        let spec = tiny_energy_spec();
        let params = NetworkParams::init(&spec, 7);
        assert!(spec.param_count() <= 500, "tiny net grew too large to sweep");
        let x = random_image(8, 2, 6, 6);
        let analytic = energy_param_grad(&spec, &params, core::slice::from_ref(&x)).unwrap();
        let mut refnet = RefNet::new(&spec, &params);
        let x64 = to_f64(&x);
        for e in 0..analytic.entries.len() {
            let n = analytic.entries[e].tensor.numel();
            let mut numeric = Vec::with_capacity(n);
            let mut trust = Vec::with_capacity(n);
            for i in 0..n {
                let fd = fd_param_coord(&mut refnet, e, i, 1e-3, |net| {
                    net.energy_obj_tagged(&x64, (2, 6, 6))
                });
                trust.push(fd.is_some());
                numeric.push(fd.unwrap_or(0.0));
            }
            let (err, kept) = max_rel_err_masked(&analytic.entries[e].tensor.data, &numeric, &trust);
            assert!(kept > 0.85, "entry {e}: only {kept} of coordinates trusted");
            assert!(err < 1e-3, "entry {e}: max rel err {err}");
        }
    }

    #[test]
    fn batched_param_grad_is_the_mean_of_singles() {
        let spec = tiny_energy_spec();
        let params = NetworkParams::init(&spec, 2);
        let batch: Vec<ImageTensor> = (0..3).map(|i| random_image(20 + i, 2, 6, 6)).collect();
        let (batched, mean_e) = energy_param_grad_with_mean(&spec, &params, &batch).unwrap();
        // Accumulate singles in the same order the batch path does.
        let mut acc = NetworkParams::zeros(&spec);
        let mut esum = 0.0f32;
        for x in &batch {
            let g = energy_param_grad(&spec, &params, core::slice::from_ref(x)).unwrap();
            acc.add_scaled(&g, 1.0);
            esum += energy(&spec, &params, x).unwrap();
        }
        acc.scale(1.0 / 3.0);
        assert_eq!(mean_e.to_bits(), (esum / 3.0).to_bits());
        for (a, b) in batched.entries.iter().zip(&acc.entries) {
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn classifier_zero_params_uniform_softmax_ln10_loss() {
        let spec = NetworkSpec::classifier_default(8, 8, 10);
        let params = NetworkParams::zeros(&spec);
        let x = random_image(4, 3, 8, 8);
        let logits = classifier_forward(&spec, &params, &x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let probs = softmax(&logits);
        for &p in &probs {
            assert!((p - 0.1).abs() < 1e-6);
        }
        let (loss, _) = classifier_backward(&spec, &params, &x, 3).unwrap();
        assert!((loss - 2.302_585).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn correct_class_margin_drives_loss_to_zero_monotonically() {
        let logits: Vec<f32> = vec![0.0, 0.0, 0.0];
        let mut last = f32::INFINITY;
        for margin in [0.0f32, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let mut l = logits.clone();
            l[1] += margin;
            let m = l.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f32 = l.iter().map(|&v| libm::expf(v - m)).sum();
            let loss = m + libm::logf(sum) - l[1];
            assert!(loss < last, "loss not decreasing at margin {margin}");
            last = loss;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let spec = NetworkSpec::classifier_default(8, 8, 4);
        for seed in 0..3u64 {
            let params = NetworkParams::init(&spec, seed + 40);
            let x = random_image(seed + 50, 3, 8, 8);
            let label = (seed as usize) % 4;
            let (_, gx) = classifier_input_grad(&spec, &params, &x, label).unwrap();
            let refnet = RefNet::new(&spec, &params);
            let (numeric, trust) =
                fd_grad_checked(|v| refnet.ce_obj_tagged(v, (3, 8, 8), label), &to_f64(&x), 1e-3);
            let (err, kept) = max_rel_err_masked(&gx.data, &numeric, &trust);
            assert!(kept > 0.85, "seed {seed}: only {kept} of coordinates trusted");
            assert!(err < 1e-3, "seed {seed}: input grad rel err {err}");
        }
    }

    #[test]
    fn classifier_param_grad_spot_checks_match_finite_differences() {
        let spec = NetworkSpec::classifier_default(8, 8, 3);
        let params = NetworkParams::init(&spec, 60);
        let x = random_image(61, 3, 8, 8);
        let (_, grads) = classifier_backward(&spec, &params, &x, 1).unwrap();
        let mut refnet = RefNet::new(&spec, &params);
        let x64 = to_f64(&x);
        let mut coords = Stream::named(62, "coords", 0);
        let mut probed = 0usize;
        let mut skipped = 0usize;
        for e in 0..grads.entries.len() {
            let n = grads.entries[e].tensor.numel();
            for _ in 0..20.min(n) {
                let i = coords.below(n as u64) as usize;
                probed += 1;
                let Some(numeric) =
                    fd_param_coord(&mut refnet, e, i, 1e-3, |net| net.ce_obj_tagged(&x64, (3, 8, 8), 1))
                else {
                    skipped += 1;
                    continue;
                };
                let analytic = grads.entries[e].tensor.data[i] as f64;
                let err = (analytic - numeric).abs() / numeric.abs().max(1e-3);
                assert!(err < 1e-3, "entry {e} coord {i}: {analytic} vs {numeric}");
            }
        }
        assert!(skipped * 4 < probed, "{skipped} of {probed} probes straddled kinks");
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let spec = NetworkSpec::classifier_default(8, 8, 4);
        let params = NetworkParams::zeros(&spec);
        let x = random_image(70, 3, 8, 8);
        assert!(matches!(
            classifier_backward(&spec, &params, &x, 4),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let spec = NetworkSpec::energy_default();
        let params = NetworkParams::init(&spec, 0);
        let x = random_image(0, 1, 8, 8);
        assert!(matches!(
            energy(&spec, &params, &x),
            Err(Error::ShapeMismatch { expected: (3, 8, 8), actual: (1, 8, 8) })
        ));
    }

    #[test]
    fn avg_pool_requires_divisible_extent() {
        let spec = NetworkSpec {
            layers: vec![Layer::AvgPool { k: 2 }, Layer::Dense { input: 12, output: 1 }],
        };
        let params = NetworkParams::zeros(&spec);
        let x = random_image(0, 3, 5, 4);
        assert!(matches!(energy(&spec, &params, &x), Err(Error::BadSpec(_))));
    }

    #[test]
    fn init_draws_have_the_declared_scale_and_are_name_stable() {
        let spec = NetworkSpec::energy_default();
        let params = NetworkParams::init(&spec, 9);
        let big = params.get("layer2.weight").unwrap();
        let n = big.data.len() as f64;
        let mean: f64 = big.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = big.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 3e-3, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 2e-3, "std {}", var.sqrt());
        // Same seed, same draws; different seed, different draws.
        let again = NetworkParams::init(&spec, 9);
        assert_eq!(params, again);
        let other = NetworkParams::init(&spec, 10);
        assert_ne!(params, other);
    }

    #[test]
    fn quadratic_and_zero_surrogates_are_analytic() {
        let x = ImageTensor::from_vec(1, 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        let q = Quadratic { a: 2.0 };
        assert_eq!(q.energy(&x).unwrap(), 14.0); // 0.5 * 2 * (1 + 4 + 9)
        assert_eq!(q.input_grad(&x).unwrap().data, vec![2.0, -4.0, 6.0]);
        let z = ZeroEnergy;
        assert_eq!(z.energy(&x).unwrap(), 0.0);
        assert!(z.input_grad(&x).unwrap().data.iter().all(|&v| v == 0.0));
    }
}
