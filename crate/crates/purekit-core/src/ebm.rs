//! Convergent maximum-likelihood training of the energy model.
//!
//! Each step contrasts a batch of lightly noised data images (positives)
//! against a batch of persistent-bank images advanced by K Langevin steps
//! (negatives):
//!
//!   delta = mean grad_theta G(X+) - mean grad_theta G(X-)
//!   theta <- theta - lr * delta
//!
//! which is plain SGD on the negative log-likelihood; driving data energy
//! down and sample energy up until the two meet. The bank starts as uniform
//! noise and is updated in place with each chain's final state, so chains
//! accumulate Langevin time across the whole run (persistent chains).
//!
//! Training is unsupervised by construction: nothing in this module accepts
//! labels or any record of which images are poisoned. Defending against a
//! poisoned dataset is the same code path on a different input file.

use alloc::string::String;
use alloc::vec::Vec;

use crate::codec;
use crate::exec::Executor;
use crate::langevin::{ChainState, LangevinConfig};
use crate::net::{energy_param_grad_with_mean, NetworkParams, NetworkSpec};
use crate::rng::{normal_draws, Stream};
use crate::tensor::{ImageTensor, NamedTensor, Tensor};
use crate::{Error, Result};

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Outer SGD steps J.
    pub steps: u64,
    /// Batch size m, for both positives and negatives.
    pub batch_size: usize,
    /// Std of the Gaussian perturbation applied to data images.
    pub data_noise: f32,
    /// Langevin steps K applied to each selected bank image per outer step.
    pub langevin_steps_per_iter: u64,
    /// Step size of those Langevin updates.
    pub langevin_step_size: f32,
    /// SGD learning rate.
    pub sgd_lr: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5_000,
            batch_size: 64,
            data_noise: 0.02,
            langevin_steps_per_iter: 100,
            langevin_step_size: 0.01,
            sgd_lr: 5e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::BadSpec("batch_size must be at least 1".into()));
        }
        if !(self.langevin_step_size > 0.0) || !self.langevin_step_size.is_finite() {
            return Err(Error::BadSpec(alloc::format!(
                "langevin_step_size must be positive and finite, got {}",
                self.langevin_step_size
            )));
        }
        for (name, v) in [("data_noise", self.data_noise), ("sgd_lr", self.sgd_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::BadSpec(alloc::format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The Langevin dynamics used on negative chains: the same update the
    /// purification transform runs, so the model is trained under the exact
    /// sampler it will defend with.
    pub fn negative_dynamics(&self) -> LangevinConfig {
        LangevinConfig {
            steps: self.langevin_steps_per_iter,
            step_size: self.langevin_step_size,
            noise_scale: 1.0,
            clamp: Some((0.0, 1.0)),
        }
    }
}

/// Per-step training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub e_pos: f32,
    pub e_neg: f32,
    pub grad_norm: f32,
}

/// Gap beyond which training aborts instead of silently diverging.
const DIVERGENCE_GAP: f32 = 1e4;

// ── Persistent bank ──────────────────────────────────────────────────────────

/// The persistent image bank: one slot per training image, initialized to
/// uniform noise and evolved in place by the negative chains. Size and
/// image shape are fixed for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentBank {
    pub images: Vec<ImageTensor>,
}

impl PersistentBank {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A bank of `n` i.i.d. Uniform[0,1] images.
pub fn init_bank(n: usize, (c, h, w): (usize, usize, usize), seed: u64) -> Result<PersistentBank> {
    if n == 0 {
        return Err(Error::EmptyInput("bank size must be at least 1"));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut img = ImageTensor::zeros(c, h, w);
        Stream::named(seed, "bank-init", i as u64).fill_uniform(&mut img.data);
        images.push(img);
    }
    Ok(PersistentBank { images })
}

// ── Training ─────────────────────────────────────────────────────────────────

/// Observation hooks for a training run. `on_checkpoint` may return false
/// to abort the run (a checkpoint that cannot be written is not worth
/// training past).
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _stats: &TrainStats) {}
    fn on_checkpoint(&mut self, _step: u64, _params: &NetworkParams, _bank: &PersistentBank) -> bool {
        true
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// One contrastive update. The positive batch is perturbed, the selected
/// bank entries are advanced by K Langevin steps and written back, and the
/// parameters take one SGD step against the energy-difference gradient.
/// Every random draw is keyed by (seed, purpose, step), so a step is
/// reproducible in isolation.
pub fn train_step<E: Executor>(
    spec: &NetworkSpec,
    params: &mut NetworkParams,
    bank: &mut PersistentBank,
    data_batch: &[ImageTensor],
    cfg: &TrainConfig,
    step: u64,
    exec: &E,
) -> Result<TrainStats> {
    cfg.validate()?;
    let m = cfg.batch_size;
    if data_batch.len() != m {
        return Err(Error::BadSpec(alloc::format!(
            "data batch has {} images, batch_size is {m}",
            data_batch.len()
        )));
    }
    if bank.len() < m {
        return Err(Error::BadSpec(alloc::format!(
            "bank has {} images, batch_size is {m}",
            bank.len()
        )));
    }

    // Positives: data plus fresh Gaussian noise, back into pixel range.
    let mut pos_stream = Stream::named(cfg.seed, "posnoise", step);
    let mut positives = Vec::with_capacity(m);
    for img in data_batch {
        let mut p = img.clone();
        if cfg.data_noise != 0.0 {
            let mut eps = alloc::vec![0.0f32; p.len()];
            pos_stream.fill_normal(&mut eps);
            for (v, &e) in p.data.iter_mut().zip(&eps) {
                *v += cfg.data_noise * e;
            }
            p.clamp_in_place(0.0, 1.0);
        } else {
            pos_stream.skip(normal_draws(p.len()) as u64);
        }
        positives.push(p);
    }

    // Negatives: distinct bank entries advanced by K Langevin steps each.
    let selected = Stream::named(cfg.seed, "bankpick", step)
        .sample_without_replacement(m, bank.len());
    let dynamics = cfg.negative_dynamics();
    let chain_results = exec.map_collect(m, &|slot| {
        let mut chain = ChainState::new(
            bank.images[selected[slot]].clone(),
            Stream::named(cfg.seed, "train-langevin", step * m as u64 + slot as u64),
        );
        for _ in 0..dynamics.steps {
            chain.advance(&Ref(params, spec), &dynamics)?;
        }
        Ok(chain.x)
    });
    let mut negatives = Vec::with_capacity(m);
    for (slot, r) in chain_results.into_iter().enumerate() {
        match r {
            Ok(img) => negatives.push(img),
            Err(Error::NonFinite { step, .. }) => {
                return Err(Error::ChainFailed { index: slot, step })
            }
            Err(e) => return Err(e),
        }
    }
    for (slot, img) in negatives.iter().enumerate() {
        bank.images[selected[slot]] = img.clone();
    }

    // Contrastive gradient and divergence guard.
    let (pos_grad, e_pos) = energy_param_grad_with_mean(spec, params, &positives)?;
    let (neg_grad, e_neg) = energy_param_grad_with_mean(spec, params, &negatives)?;
    if !e_pos.is_finite() || !e_neg.is_finite() {
        return Err(Error::NonFinite { context: "training energy", step });
    }
    let gap = e_pos - e_neg;
    if libm::fabsf(gap) > DIVERGENCE_GAP {
        return Err(Error::Diverged { step, gap });
    }
    let mut delta = pos_grad;
    delta.add_scaled(&neg_grad, -1.0);
    let grad_norm = delta.l2_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { context: "training gradient", step });
    }
    params.add_scaled(&delta, -cfg.sgd_lr);
    Ok(TrainStats { e_pos, e_neg, grad_norm })
}

/// Wrapper giving `EnergyFn` a view of borrowed spec and params without a
/// clone per chain.
struct Ref<'a>(&'a NetworkParams, &'a NetworkSpec);

impl crate::net::EnergyFn for Ref<'_> {
    fn energy(&self, x: &ImageTensor) -> Result<f32> {
        crate::net::energy(self.1, self.0, x)
    }

    fn input_grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        crate::net::energy_input_grad(self.1, self.0, x)
    }
}

/// Continue a run from `start_step` up to `cfg.steps`. Because every draw
/// is keyed by its step index, resuming from a checkpoint at step j is
/// bitwise identical to never having stopped.
#[allow(clippy::too_many_arguments)]
pub fn train_resume<E: Executor, O: TrainObserver>(
    spec: &NetworkSpec,
    params: &mut NetworkParams,
    bank: &mut PersistentBank,
    dataset: &[ImageTensor],
    cfg: &TrainConfig,
    start_step: u64,
    checkpoint_every: u64,
    exec: &E,
    observer: &mut O,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::BadSpec(alloc::format!(
            "dataset has {} images, batch_size is {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    for j in start_step..cfg.steps {
        let picks = Stream::named(cfg.seed, "data", j)
            .sample_without_replacement(cfg.batch_size, dataset.len());
        let batch: Vec<ImageTensor> = picks.iter().map(|&i| dataset[i].clone()).collect();
        let stats = train_step(spec, params, bank, &batch, cfg, j, exec)?;
        observer.on_step(j, &stats);
        if checkpoint_every > 0 && (j + 1) % checkpoint_every == 0 {
            if !observer.on_checkpoint(j + 1, params, bank) {
                return Err(Error::Aborted { step: j + 1 });
            }
        }
    }
    Ok(())
}

/// Full training run: fresh parameter init, fresh uniform bank, then
/// `cfg.steps` contrastive updates.
pub fn train<E: Executor, O: TrainObserver>(
    spec: &NetworkSpec,
    dataset: &[ImageTensor],
    cfg: &TrainConfig,
    checkpoint_every: u64,
    exec: &E,
    observer: &mut O,
) -> Result<(NetworkParams, PersistentBank)> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut params = NetworkParams::init(spec, cfg.seed);
    let mut bank = init_bank(dataset.len(), dataset[0].shape(), cfg.seed)?;
    train_resume(spec, &mut params, &mut bank, dataset, cfg, 0, checkpoint_every, exec, observer)?;
    Ok((params, bank))
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

/// Name of the sidecar entry holding the persistent bank.
pub const BANK_ENTRY: &str = "__bank__";
/// Name of the sidecar entry holding run metadata text.
pub const META_ENTRY: &str = "__meta__";

/// Flatten params, bank, and metadata into one entry list for the
/// checkpoint container: parameter entries first (in layout order), then
/// the bank as a rank-4 tensor, then the metadata text.
pub fn checkpoint_to_entries(
    params: &NetworkParams,
    bank: &PersistentBank,
    meta: &str,
) -> Result<Vec<NamedTensor>> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("bank in checkpoint"));
    }
    let (c, h, w) = bank.images[0].shape();
    let mut data = Vec::with_capacity(bank.len() * c * h * w);
    for img in &bank.images {
        bank.images[0].check_shape(img)?;
        data.extend_from_slice(&img.data);
    }
    let mut entries = params.entries.clone();
    entries.push(NamedTensor {
        name: BANK_ENTRY.into(),
        tensor: Tensor { shape: alloc::vec![bank.len(), c, h, w], data },
    });
    entries.push(codec::text_entry(META_ENTRY, meta));
    Ok(entries)
}

/// Rebuild params, bank, and metadata from a checkpoint entry list,
/// validating the parameters against the spec.
pub fn checkpoint_from_entries(
    spec: &NetworkSpec,
    entries: &[NamedTensor],
) -> Result<(NetworkParams, PersistentBank, String)> {
    let mut param_entries = Vec::new();
    let mut bank = None;
    let mut meta = None;
    for e in entries {
        if e.name == BANK_ENTRY {
            let [n, c, h, w] = e.tensor.shape[..] else {
                return Err(Error::BadSpec("bank entry must be rank 4".into()));
            };
            let mut images = Vec::with_capacity(n);
            for i in 0..n {
                let data = e.tensor.data[i * c * h * w..(i + 1) * c * h * w].to_vec();
                images.push(ImageTensor::from_vec(c, h, w, data)?);
            }
            bank = Some(PersistentBank { images });
        } else if e.name == META_ENTRY {
            meta = Some(
                codec::entry_text(e)
                    .ok_or_else(|| Error::BadSpec("metadata entry is not text".into()))?,
            );
        } else if e.name.starts_with(codec::SIDECAR_PREFIX) {
            return Err(Error::BadSpec(alloc::format!("unknown sidecar entry {}", e.name)));
        } else {
            param_entries.push(e.clone());
        }
    }
    let params = NetworkParams { entries: param_entries };
    params.validate(spec)?;
    let bank = bank.ok_or(Error::EmptyInput("checkpoint has no bank entry"))?;
    let meta = meta.ok_or(Error::EmptyInput("checkpoint has no metadata entry"))?;
    Ok((params, bank, meta))
}

// ── Tests ────────────────────────────────────────────────────────────────────
