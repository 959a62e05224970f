//! Langevin dynamics against an energy model.
//!
//! One update is
//!
//!   x' = x - dt * grad G(x) + eta * sqrt(2 dt) * eps,   eps ~ N(0, I)
//!
//! optionally clamped to a pixel range afterwards. Running T such steps is
//! the purification transform Psi_T: images are pulled toward low-energy
//! (natural-looking) configurations, which erases adversarial perturbations
//! before they reach a downstream classifier.
//!
//! Besides purification this module carries the two diagnostics built on
//! the same update: paired-trajectory distance curves (how fast a purified
//! poisoned image forgets its poison) and the maximal Lyapunov exponent of
//! the dynamics (the ordered-to-chaotic transition in the noise scale).

use alloc::vec;
use alloc::vec::Vec;

use crate::exec::Executor;
use crate::net::EnergyFn;
use crate::rng::{normal_draws, Stream};
use crate::tensor::{l2_distance, ImageTensor};
use crate::{Error, Result};

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    /// Number of update steps T.
    pub steps: u64,
    /// Step size dt.
    pub step_size: f32,
    /// Noise multiplier eta on the sqrt(2 dt) coefficient; 0 gives pure
    /// gradient descent on the energy.
    pub noise_scale: f32,
    /// Pixel range applied after every step, or None for free dynamics.
    pub clamp: Option<(f32, f32)>,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig { steps: 150, step_size: 0.01, noise_scale: 1.0, clamp: Some((0.0, 1.0)) }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::BadSpec(alloc::format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::BadSpec(alloc::format!(
                "noise_scale must be non-negative and finite, got {}",
                self.noise_scale
            )));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::BadSpec(alloc::format!("empty clamp range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Noise standard deviation per step: eta * sqrt(2 dt).
    pub fn sigma(&self) -> f32 {
        self.noise_scale * libm::sqrtf(2.0 * self.step_size)
    }
}

// ── Single chain ─────────────────────────────────────────────────────────────

/// One Langevin chain: current point, step counter, and its private RNG
/// stream. The stream advances exactly one draw-block per step whether or
/// not noise is enabled, so eta=0 and eta>0 runs stay draw-aligned.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub x: ImageTensor,
    pub step: u64,
    pub stream: Stream,
}

impl ChainState {
    pub fn new(x: ImageTensor, stream: Stream) -> Self {
        ChainState { x, step: 0, stream }
    }

    /// Advance one step.
    pub fn advance<M: EnergyFn>(&mut self, model: &M, cfg: &LangevinConfig) -> Result<()> {
        let len = self.x.len();
        let mut eps = vec![0.0f32; len];
        draw_noise(&mut self.stream, cfg, &mut eps);
        step_with_noise(&mut self.x, model, cfg, &eps, self.step)?;
        self.step += 1;
        Ok(())
    }
}

/// Fill `eps` with unit normals, or zeros when noise is off; either way the
/// stream advances by the same draw-block so trajectories at different eta
/// consume identical stream positions.
fn draw_noise(stream: &mut Stream, cfg: &LangevinConfig, eps: &mut [f32]) {
    if cfg.noise_scale != 0.0 {
        stream.fill_normal(eps);
    } else {
        eps.fill(0.0);
        stream.skip(normal_draws(eps.len()) as u64);
    }
}

/// Apply one update with the given pre-drawn unit noise.
fn step_with_noise<M: EnergyFn>(
    x: &mut ImageTensor,
    model: &M,
    cfg: &LangevinConfig,
    eps: &[f32],
    step: u64,
) -> Result<()> {
    let grad = model.input_grad(x)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite { context: "langevin gradient", step });
    }
    let dt = cfg.step_size;
    let sigma = cfg.sigma();
    for ((v, &g), &e) in x.data.iter_mut().zip(&grad.data).zip(eps) {
        *v = *v - dt * g + sigma * e;
    }
    if let Some((lo, hi)) = cfg.clamp {
        x.clamp_in_place(lo, hi);
    }
    Ok(())
}

/// One update of `x` drawing noise from `stream`; returns the new point.
pub fn langevin_step<M: EnergyFn>(
    x: &ImageTensor,
    model: &M,
    cfg: &LangevinConfig,
    stream: &mut Stream,
    step: u64,
) -> Result<ImageTensor> {
    let mut out = x.clone();
    let mut eps = vec![0.0f32; out.len()];
    draw_noise(stream, cfg, &mut eps);
    step_with_noise(&mut out, model, cfg, &eps, step)?;
    Ok(out)
}

// ── Purification ─────────────────────────────────────────────────────────────

/// Run the full chain for one image under an explicit chain id.
fn run_chain<M: EnergyFn>(
    x: &ImageTensor,
    chain_id: u64,
    model: &M,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<ImageTensor> {
    let mut state = ChainState::new(x.clone(), Stream::named(seed, "purify", chain_id));
    for _ in 0..cfg.steps {
        state.advance(model, cfg)?;
    }
    Ok(state.x)
}

/// Psi_T over a dataset: chain i is keyed by id `ids[i]`, so an image keeps
/// its chain (and its output, bitwise) wherever it sits in the batch.
pub fn purify_with_ids<M: EnergyFn, E: Executor>(
    dataset: &[ImageTensor],
    ids: &[u64],
    model: &M,
    cfg: &LangevinConfig,
    seed: u64,
    exec: &E,
) -> Result<Vec<ImageTensor>> {
    cfg.validate()?;
    if dataset.len() != ids.len() {
        return Err(Error::BadSpec(alloc::format!(
            "{} images but {} chain ids",
            dataset.len(),
            ids.len()
        )));
    }
    if let Some(first) = dataset.first() {
        for img in dataset {
            first.check_shape(img)?;
        }
    }
    let results = exec.map_collect(dataset.len(), &|i| {
        run_chain(&dataset[i], ids[i], model, cfg, seed)
    });
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => out.push(img),
            Err(Error::NonFinite { step, .. }) => {
                return Err(Error::ChainFailed { index: i, step })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Psi_T with the default chain ids 0..n (chain i purifies image i).
pub fn purify<M: EnergyFn, E: Executor>(
    dataset: &[ImageTensor],
    model: &M,
    cfg: &LangevinConfig,
    seed: u64,
    exec: &E,
) -> Result<Vec<ImageTensor>> {
    let ids: Vec<u64> = (0..dataset.len() as u64).collect();
    purify_with_ids(dataset, &ids, model, cfg, seed, exec)
}

// ── Trajectory diagnostics ───────────────────────────────────────────────────

/// Distance curves for a coupled pair of chains started at a clean image
/// and its perturbed copy, driven by identical noise. Lists are indexed by
/// `steps`; `crossover` is the first recorded step at which the purified
/// poisoned image sits strictly closer to the clean image than to its own
/// poisoned start, sustained for two consecutive records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<u64>,
    /// ‖Psi_t(x) − x‖₂: how far the clean chain has wandered.
    pub d_clean_pure: Vec<f32>,
    /// ‖Psi_t(x+δ) − x‖₂: purified poison against the clean image.
    pub d_clean_poisonpure: Vec<f32>,
    /// ‖Psi_t(x+δ) − (x+δ)‖₂: purified poison against its own start.
    pub d_poison_poisonpure: Vec<f32>,
    pub crossover: Option<u64>,
}

pub fn trajectory_distances<M: EnergyFn>(
    x_clean: &ImageTensor,
    delta: &ImageTensor,
    model: &M,
    cfg: &LangevinConfig,
    record_every: u64,
    seed: u64,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    x_clean.check_shape(delta)?;
    if record_every == 0 {
        return Err(Error::BadSpec("record_every must be at least 1".into()));
    }

    let mut x_p0 = x_clean.clone();
    for (v, &d) in x_p0.data.iter_mut().zip(&delta.data) {
        *v += d;
    }
    if let Some((lo, hi)) = cfg.clamp {
        x_p0.clamp_in_place(lo, hi);
    }

    let mut xc = x_clean.clone();
    let mut xp = x_p0.clone();
    let mut stream = Stream::named(seed, "trajectory", 0);
    let mut eps = vec![0.0f32; x_clean.len()];

    let mut rec = TrajectoryRecord {
        steps: Vec::new(),
        d_clean_pure: Vec::new(),
        d_clean_poisonpure: Vec::new(),
        d_poison_poisonpure: Vec::new(),
        crossover: None,
    };
    let record = |t: u64, xc: &ImageTensor, xp: &ImageTensor, rec: &mut TrajectoryRecord| {
        rec.steps.push(t);
        rec.d_clean_pure.push(l2_distance(xc, x_clean));
        rec.d_clean_poisonpure.push(l2_distance(xp, x_clean));
        rec.d_poison_poisonpure.push(l2_distance(xp, &x_p0));
    };
    record(0, &xc, &xp, &mut rec);

    for t in 0..cfg.steps {
        // One draw-block per step, shared by both chains: common-noise
        // coupling makes the pair differ only through the energy gradient.
        draw_noise(&mut stream, cfg, &mut eps);
        step_with_noise(&mut xc, model, cfg, &eps, t)?;
        step_with_noise(&mut xp, model, cfg, &eps, t)?;
        let done = t + 1 == cfg.steps;
        if (t + 1) % record_every == 0 || done {
            record(t + 1, &xc, &xp, &mut rec);
        }
    }

    // Strict inequality at two consecutive records, to suppress flicker.
    for i in 0..rec.steps.len().saturating_sub(1) {
        let now = rec.d_poison_poisonpure[i] > rec.d_clean_poisonpure[i];
        let next = rec.d_poison_poisonpure[i + 1] > rec.d_clean_poisonpure[i + 1];
        if now && next {
            rec.crossover = Some(rec.steps[i]);
            break;
        }
    }
    Ok(rec)
}

// ── Lyapunov exponent ────────────────────────────────────────────────────────

/// Perturbation magnitude for the Benettin procedure.
pub const LYAPUNOV_D0: f32 = 1e-4;

/// Maximal Lyapunov exponent of the dynamics, per step, by the Benettin
/// renormalization procedure under common-noise coupling: a base chain and
/// an infinitesimally shifted partner share every noise draw, the shift is
/// renormalized to `LYAPUNOV_D0` every `renorm_every` steps, and the mean
/// log growth per step over `horizon / renorm_every` full blocks is
/// returned.
///
/// With no clamp the coupled difference obeys the noise-free recursion
/// delta' = delta - dt*(grad G(x+delta) - grad G(x)) exactly (the shared
/// noise cancels term by term), so it is tracked directly; a model with
/// zero gradient then yields exactly 0. Each block's growth is measured
/// against the block's actual starting norm, which is d0 up to one f32
/// rounding, so the estimate equals the d0-based formula to within float
/// precision while degenerate cases stay exact. With a clamp both chains
/// are materialized and the difference is measured, since clamping is not
/// differentiable.
pub fn lyapunov_exponent<M: EnergyFn>(
    model: &M,
    x0: &ImageTensor,
    cfg: &LangevinConfig,
    horizon: u64,
    renorm_every: u64,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if renorm_every == 0 || horizon < renorm_every {
        return Err(Error::BadSpec(alloc::format!(
            "need horizon >= renorm_every >= 1, got horizon {horizon}, renorm_every {renorm_every}"
        )));
    }
    let blocks = horizon / renorm_every;
    let len = x0.len();

    // Initial perturbation: random direction scaled to d0.
    let mut delta = vec![0.0f32; len];
    Stream::named(seed, "lyapunov-delta", 0).fill_normal(&mut delta);
    let norm = l2_norm(&delta);
    if norm == 0.0 {
        return Err(Error::DegenerateCoupling { step: 0 });
    }
    for v in delta.iter_mut() {
        *v *= LYAPUNOV_D0 / norm;
    }

    let mut stream = Stream::named(seed, "lyapunov", 0);
    let mut eps = vec![0.0f32; len];
    let mut x = x0.clone();
    let mut x_pert = x0.clone();
    let materialize = cfg.clamp.is_some();
    if materialize {
        for (v, &d) in x_pert.data.iter_mut().zip(delta.iter()) {
            *v += d;
        }
    }

    let mut log_sum = 0.0f64;
    for block in 0..blocks {
        let start_norm = if materialize {
            l2_distance(&x_pert, &x)
        } else {
            l2_norm(&delta)
        };
        if start_norm == 0.0 {
            return Err(Error::DegenerateCoupling { step: block * renorm_every });
        }
        for s in 0..renorm_every {
            let t = block * renorm_every + s;
            draw_noise(&mut stream, cfg, &mut eps);
            if materialize {
                step_with_noise(&mut x, model, cfg, &eps, t)?;
                step_with_noise(&mut x_pert, model, cfg, &eps, t)?;
            } else {
                let g = model.input_grad(&x)?;
                let mut shifted = x.clone();
                for (v, &d) in shifted.data.iter_mut().zip(delta.iter()) {
                    *v += d;
                }
                let g_pert = model.input_grad(&shifted)?;
                if !g.is_finite() || !g_pert.is_finite() {
                    return Err(Error::NonFinite { context: "lyapunov gradient", step: t });
                }
                let dt = cfg.step_size;
                for ((d, &a), &b) in delta.iter_mut().zip(&g_pert.data).zip(&g.data) {
                    *d -= dt * (a - b);
                }
                step_with_noise(&mut x, model, cfg, &eps, t)?;
            }
        }
        let end_norm = if materialize {
            l2_distance(&x_pert, &x)
        } else {
            l2_norm(&delta)
        };
        if end_norm == 0.0 || !end_norm.is_finite() {
            return Err(Error::DegenerateCoupling { step: (block + 1) * renorm_every });
        }
        log_sum += libm::log(end_norm as f64 / start_norm as f64);
        let scale = LYAPUNOV_D0 / end_norm;
        if materialize {
            for (p, (&b, _)) in x_pert.data.iter_mut().zip(x.data.iter().zip(0..)) {
                *p = b + (*p - b) * scale;
            }
            if let Some((lo, hi)) = cfg.clamp {
                x_pert.clamp_in_place(lo, hi);
            }
        } else {
            for d in delta.iter_mut() {
                *d *= scale;
            }
        }
    }
    Ok(log_sum / (blocks * renorm_every) as f64)
}

fn l2_norm(v: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for &x in v {
        acc += x * x;
    }
    libm::sqrtf(acc)
}

// ── Tests ────────────────────────────────────────────────────────────────────
