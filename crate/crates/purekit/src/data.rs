//! Dataset construction: a synthetic blob-class generator for desk-scale
//! runs, and an importer for the classic binary image-batch layout
//! (1 label byte + C·H·W pixel bytes per record).
//!
//! The generator is built to be analyzable, not pretty. Every class paints
//! the same centered Gaussian blob in a class-specific color drawn from a
//! three-phase palette, so the class-conditional channel means differ by a
//! closed-form amount (`expected_class_mean_gap`), and tests can hold the
//! generator to its own arithmetic.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use purekit_core::codec::{dequantize, quantize};
use purekit_core::rng::Stream;
use purekit_core::tensor::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    BadParam(String),
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

// ── Synthetic blob classes ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the class palette around mid-gray; larger = easier.
    pub margin: f32,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            per_class_train: 64,
            per_class_test: 16,
            height: 32,
            width: 32,
            margin: 0.25,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(DataError::BadParam(format!(
                "classes must be in [2, 255], got {}",
                self.classes
            )));
        }
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(DataError::BadParam(format!(
                "height and width must be multiples of 4 and at least 4, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=0.3).contains(&self.margin) {
            return Err(DataError::BadParam(format!(
                "margin must be in [0, 0.3], got {}",
                self.margin
            )));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(DataError::BadParam(format!(
                "noise must be in [0, 0.2], got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

const BACKGROUND: f32 = 0.35;

/// Class colors: mid-gray plus a three-phase cosine at amplitude `margin`.
/// The minimum pairwise color distance is margin·√6·sin(π/classes).
pub fn palette(classes: usize, margin: f32) -> Vec<[f32; 3]> {
    (0..classes)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / classes as f64;
            [0, 1, 2].map(|ph| {
                let phase = theta + 2.0 * PI * ph as f64 / 3.0;
                0.5 + margin * phase.cos() as f32
            })
        })
        .collect()
}

/// Blob weight at each pixel: a Gaussian of scale min(h,w)/4 centered on
/// the image, evaluated on the pixel grid.
fn blob_weights(h: usize, w: usize) -> Vec<f32> {
    let sigma = (h.min(w) as f64) / 4.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out.push((-r2 / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    out
}

/// Mean blob weight over the pixel grid: the fraction of the color
/// difference that survives spatial averaging.
pub fn blob_mass(h: usize, w: usize) -> f32 {
    let weights = blob_weights(h, w);
    (weights.iter().map(|&v| v as f64).sum::<f64>() / weights.len() as f64) as f32
}

/// Closed-form minimum distance between class-conditional channel-mean
/// vectors, before noise and quantization: palette spacing times the blob
/// mass fraction.
pub fn expected_class_mean_gap(cfg: &ToyConfig) -> f32 {
    let spacing = cfg.margin as f64 * 6.0f64.sqrt() * (PI / cfg.classes as f64).sin();
    (spacing * blob_mass(cfg.height, cfg.width) as f64) as f32
}

fn render(cfg: &ToyConfig, weights: &[f32], colors: &[[f32; 3]], index: u64) -> (ImageTensor, u8) {
    let class = (index as usize) % cfg.classes;
    let color = colors[class];
    let mut img = ImageTensor::zeros(3, cfg.height, cfg.width);
    let hw = cfg.height * cfg.width;
    let mut noise = vec![0.0f32; img.len()];
    Stream::named(cfg.seed, "gen-noise", index).fill_uniform(&mut noise);
    for ch in 0..3 {
        for p in 0..hw {
            let g = weights[p];
            let v = BACKGROUND * (1.0 - g) + color[ch] * g
                + cfg.noise * (2.0 * noise[ch * hw + p] - 1.0);
            // Snap to the byte grid the dataset format stores.
            img.data[ch * hw + p] = dequantize(quantize(v));
        }
    }
    (img, class as u8)
}

/// Deterministic train/test sets: classes interleave round-robin, image i
/// draws its noise from a stream named by i alone, and test images continue
/// the index sequence after the training images.
pub fn generate(cfg: &ToyConfig) -> Result<(Vec<ImageTensor>, Vec<u8>, Vec<ImageTensor>, Vec<u8>)> {
    cfg.validate()?;
    let weights = blob_weights(cfg.height, cfg.width);
    let colors = palette(cfg.classes, cfg.margin);
    let n_train = cfg.classes * cfg.per_class_train;
    let n_test = cfg.classes * cfg.per_class_test;
    let mut train = (Vec::with_capacity(n_train), Vec::with_capacity(n_train));
    let mut test = (Vec::with_capacity(n_test), Vec::with_capacity(n_test));
    for i in 0..(n_train + n_test) {
        let (img, label) = render(cfg, &weights, &colors, i as u64);
        let side = if i < n_train { &mut train } else { &mut test };
        side.0.push(img);
        side.1.push(label);
    }
    Ok((train.0, train.1, test.0, test.1))
}

// ── Binary batch import ──────────────────────────────────────────────────────

pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: u8 = 10;

/// Read one or more binary batch files (1 label byte + 3072 pixel bytes
/// per record, channel-planar row-major) and decode them losslessly.
pub fn import_cifar(paths: &[PathBuf]) -> Result<(Vec<ImageTensor>, Vec<u8>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)
            .map_err(|source| DataError::File { path: path.clone(), source })?;
        import_cifar_bytes(&bytes, path, &mut images, &mut labels)?;
    }
    Ok((images, labels))
}

fn import_cifar_bytes(
    bytes: &[u8],
    path: &Path,
    images: &mut Vec<ImageTensor>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            message: format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label >= CIFAR_CLASSES {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                message: format!("record {r}: label {label} outside [0, 9]"),
            });
        }
        let mut img = ImageTensor::zeros(CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE);
        for (v, &b) in img.data.iter_mut().zip(&record[1..]) {
            *v = dequantize(b);
        }
        images.push(img);
        labels.push(label);
    }
    Ok(())
}

// ── Tests ────────────────────────────────────────────────────────────────────
