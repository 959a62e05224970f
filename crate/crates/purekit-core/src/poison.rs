//! Clean-label data poisoning at desk scale.
//!
//! Two attack kinds share one bookkeeping type: `Triggered` patches a
//! fraction of the target class with one optimized image-wide trigger
//! (crafted against a surrogate classifier so that patched images pull
//! toward the target class), and `TriggerlessRandom` adds bounded uniform
//! noise to a fraction of the whole set, a null poison for calibrating
//! metrics. Both are clean-label: labels are copied verbatim, and the
//! perturbation never exceeds `xi` per pixel.
//!
//! The poison mask records which images were touched. It exists purely for
//! evaluation; neither EBM training nor classifier training accepts it.

use alloc::vec;
use alloc::vec::Vec;

use crate::net::{classifier_input_grad, NetworkParams, NetworkSpec};
use crate::rng::Stream;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

/// Default ℓ∞ bound: 8/255, the usual imperceptibility budget.
pub const DEFAULT_XI: f32 = 8.0 / 255.0;
/// Default trigger-crafting iteration count.
pub const DEFAULT_TRIGGER_ITERS: u64 = 300;

// ── Domain types ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonKind {
    Triggered,
    TriggerlessRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSpec {
    pub kind: PoisonKind,
    /// ℓ∞ budget per pixel.
    pub xi: f32,
    /// Fraction poisoned: of the target class (triggered) or of the whole
    /// set (triggerless).
    pub alpha: f32,
    /// The class the attack is built around.
    pub target_class: usize,
    /// The label the attacker wants triggered inputs to receive at test
    /// time; for the class-wide trigger attack this is the target class.
    pub adv_label: usize,
    /// The trigger patch; required for the triggered kind, ignored
    /// otherwise.
    pub trigger: Option<ImageTensor>,
}

impl PoisonSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::InfeasiblePoison(alloc::format!(
                "xi must be non-negative and finite, got {}",
                self.xi
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InfeasiblePoison(alloc::format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.kind == PoisonKind::Triggered {
            let Some(trigger) = &self.trigger else {
                return Err(Error::InfeasiblePoison("triggered kind needs a trigger".into()));
            };
            for &v in &trigger.data {
                if !(libm::fabsf(v) <= self.xi) {
                    return Err(Error::InfeasiblePoison(alloc::format!(
                        "trigger value {v} exceeds the xi={} bound",
                        self.xi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A dataset with its poison bookkeeping. Labels are bit-identical to the
/// clean labels (clean-label attack); `poison_mask[i]` marks whether image
/// i was perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u8>,
    pub poison_mask: Vec<bool>,
}

// ── Perturbation primitives ──────────────────────────────────────────────────

/// Clip every component to [-xi, xi]. Idempotent.
pub fn project_linf(t: &ImageTensor, xi: f32) -> ImageTensor {
    let mut out = t.clone();
    for v in out.data.iter_mut() {
        *v = v.clamp(-xi, xi);
    }
    out
}

/// x + rho, clamped back into pixel range.
pub fn apply_trigger(x: &ImageTensor, rho: &ImageTensor) -> Result<ImageTensor> {
    x.check_shape(rho)?;
    let mut out = x.clone();
    for (v, &r) in out.data.iter_mut().zip(&rho.data) {
        *v += r;
    }
    out.clamp_in_place(0.0, 1.0);
    Ok(out)
}

// ── Trigger crafting ─────────────────────────────────────────────────────────

/// Craft a class-wide trigger against a surrogate classifier: projected
/// signed-gradient descent on the mean cross-entropy of patched
/// target-class images toward the target label. The patch starts at zero
/// and is re-projected into the ℓ∞ ball after every step, so the bound
/// holds exactly at all times.
///
/// Crafting is deterministic (full-batch gradients, zero init); `_seed` is
/// kept in the signature for interface stability.
#[allow(clippy::too_many_arguments)]
pub fn craft_trigger(
    spec: &NetworkSpec,
    surrogate: &NetworkParams,
    dataset_pi: &[ImageTensor],
    target_class: usize,
    xi: f32,
    iters: u64,
    lr: f32,
    _seed: u64,
) -> Result<ImageTensor> {
    let Some(first) = dataset_pi.first() else {
        return Err(Error::EmptyInput("target-class images for trigger crafting"));
    };
    for img in dataset_pi {
        first.check_shape(img)?;
    }
    let (c, h, w) = first.shape();
    let mut rho = ImageTensor::zeros(c, h, w);
    for iter in 0..iters {
        let mut grad = vec![0.0f32; rho.len()];
        let mut loss_sum = 0.0f32;
        for x in dataset_pi {
            let patched = apply_trigger(x, &rho)?;
            let (loss, gx) = classifier_input_grad(spec, surrogate, &patched, target_class)?;
            loss_sum += loss;
            // The clamp in apply_trigger zeroes sensitivity wherever the
            // raw sum left pixel range.
            for ((g, &gi), (&xv, &rv)) in
                grad.iter_mut().zip(&gx.data).zip(x.data.iter().zip(&rho.data))
            {
                let raw = xv + rv;
                if (0.0..=1.0).contains(&raw) {
                    *g += gi;
                }
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite { context: "trigger crafting loss", step: iter });
        }
        for (r, &g) in rho.data.iter_mut().zip(&grad) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *r -= lr * s;
        }
        rho = project_linf(&rho, xi);
    }
    Ok(rho)
}

// ── Dataset poisoning ────────────────────────────────────────────────────────

fn round_count(alpha: f32, n: usize) -> usize {
    libm::roundf(alpha * n as f32) as usize
}

/// Apply the poison spec to a clean dataset. Selection of which images to
/// poison is deterministic in `seed`; labels are copied unchanged.
pub fn build_poisoned_dataset(
    clean: &[ImageTensor],
    labels: &[u8],
    spec: &PoisonSpec,
    seed: u64,
) -> Result<PoisonedDataset> {
    spec.validate()?;
    if clean.len() != labels.len() {
        return Err(Error::BadSpec(alloc::format!(
            "{} images but {} labels",
            clean.len(),
            labels.len()
        )));
    }
    if clean.is_empty() {
        return Err(Error::EmptyInput("dataset to poison"));
    }
    let mut images: Vec<ImageTensor> = clean.to_vec();
    let mut mask = vec![false; clean.len()];

    match spec.kind {
        PoisonKind::Triggered => {
            let trigger = spec.trigger.as_ref().expect("validated above");
            let class_idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l as usize == spec.target_class)
                .map(|(i, _)| i)
                .collect();
            if class_idx.is_empty() {
                return Err(Error::InfeasiblePoison(alloc::format!(
                    "no images of target class {}",
                    spec.target_class
                )));
            }
            let count = round_count(spec.alpha, class_idx.len());
            let picks = Stream::named(seed, "poisonpick", 0)
                .sample_without_replacement(count, class_idx.len());
            for p in picks {
                let i = class_idx[p];
                images[i] = apply_trigger(&clean[i], trigger)?;
                mask[i] = true;
            }
        }
        PoisonKind::TriggerlessRandom => {
            let count = round_count(spec.alpha, clean.len());
            let picks = Stream::named(seed, "poisonpick", 0)
                .sample_without_replacement(count, clean.len());
            for i in picks {
                // Noise keyed by dataset index, so the perturbation an
                // image receives does not depend on selection order.
                let mut u = vec![0.0f32; clean[i].len()];
                Stream::named(seed, "poisonnoise", i as u64).fill_uniform(&mut u);
                let mut img = clean[i].clone();
                for (v, &r) in img.data.iter_mut().zip(&u) {
                    *v += (2.0 * r - 1.0) * spec.xi;
                }
                img.clamp_in_place(0.0, 1.0);
                images[i] = img;
                mask[i] = true;
            }
        }
    }
    Ok(PoisonedDataset { images, labels: labels.to_vec(), poison_mask: mask })
}

// ── Tests ────────────────────────────────────────────────────────────────────
