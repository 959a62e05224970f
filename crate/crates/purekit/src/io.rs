//! Artifact files: atomic writes plus load/save wrappers over the binary
//! codecs.
//!
//! Every write goes through a temp file in the destination directory
//! followed by a rename, so a crash mid-write never leaves a partial
//! artifact under the final name. Float-valued artifacts (checkpoints,
//! triggers, masks) use the tensor container; image datasets use the byte
//! dataset format.

use std::fs;
use std::path::{Path, PathBuf};

use purekit_core::codec::{self, CodecError};
use purekit_core::ebm::{checkpoint_from_entries, checkpoint_to_entries, PersistentBank};
use purekit_core::net::{NetworkParams, NetworkSpec};
use purekit_core::tensor::{ImageTensor, NamedTensor, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
    #[error("{path}: {message}")]
    Content { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn format_err(path: &Path) -> impl FnOnce(CodecError) -> IoError + '_ {
    move |source| IoError::Format { path: path.to_path_buf(), source }
}

fn content_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Content { path: path.to_path_buf(), message: message.into() }
}

// ── Atomic byte-level IO ─────────────────────────────────────────────────────

/// Write via a sibling temp file and rename, so the final path either holds
/// the old content or the complete new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(file_err(path))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp.{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    fs::rename(&tmp, path).map_err(file_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(file_err(path))
}

// ── Datasets ─────────────────────────────────────────────────────────────────

pub fn save_dataset(path: &Path, images: &[ImageTensor], labels: &[u8]) -> Result<()> {
    let bytes = codec::encode_dataset(images, labels).map_err(format_err(path))?;
    write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<(Vec<ImageTensor>, Vec<u8>)> {
    codec::decode_dataset(&read_bytes(path)?).map_err(format_err(path))
}

// ── Tensor containers ────────────────────────────────────────────────────────

pub fn save_entries(path: &Path, entries: &[NamedTensor]) -> Result<()> {
    let bytes = codec::encode_checkpoint(entries).map_err(format_err(path))?;
    write_atomic(path, &bytes)
}

pub fn load_entries(path: &Path) -> Result<Vec<NamedTensor>> {
    codec::decode_checkpoint(&read_bytes(path)?).map_err(format_err(path))
}

/// Save bare network parameters (a classifier, or an energy model without
/// its sampling bank).
pub fn save_params(path: &Path, params: &NetworkParams) -> Result<()> {
    save_entries(path, &params.entries)
}

/// Load network parameters and validate them against the expected spec.
pub fn load_params(path: &Path, spec: &NetworkSpec) -> Result<NetworkParams> {
    let entries = load_entries(path)?;
    let params = NetworkParams { entries };
    params
        .validate(spec)
        .map_err(|e| content_err(path, e.to_string()))?;
    Ok(params)
}

/// Save a full training checkpoint: parameters, persistent bank, and a
/// metadata string (the command layer stores its resolved config there).
pub fn save_checkpoint(
    path: &Path,
    params: &NetworkParams,
    bank: &PersistentBank,
    meta: &str,
) -> Result<()> {
    let entries =
        checkpoint_to_entries(params, bank, meta).map_err(|e| content_err(path, e.to_string()))?;
    save_entries(path, &entries)
}

pub fn load_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
) -> Result<(NetworkParams, PersistentBank, String)> {
    let entries = load_entries(path)?;
    checkpoint_from_entries(spec, &entries).map_err(|e| content_err(path, e.to_string()))
}

/// Load only the parameters from either a bare-params file or a full
/// checkpoint, ignoring any sidecar entries.
pub fn load_model_params(path: &Path, spec: &NetworkSpec) -> Result<NetworkParams> {
    let mut entries = load_entries(path)?;
    entries.retain(|e| !e.name.starts_with(codec::SIDECAR_PREFIX));
    let params = NetworkParams { entries };
    params
        .validate(spec)
        .map_err(|e| content_err(path, e.to_string()))?;
    Ok(params)
}

// ── Single images and masks ──────────────────────────────────────────────────

const IMAGE_ENTRY: &str = "image";
const MASK_ENTRY: &str = "mask";

/// Save one float image (a crafted trigger, a probe image) losslessly.
pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let tensor = Tensor::from_vec(&[image.c, image.h, image.w], image.data.clone())
        .map_err(|e| content_err(path, e.to_string()))?;
    save_entries(path, &[NamedTensor { name: IMAGE_ENTRY.into(), tensor }])
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let entries = load_entries(path)?;
    let entry = entries
        .iter()
        .find(|e| e.name == IMAGE_ENTRY)
        .ok_or_else(|| content_err(path, format!("missing entry {IMAGE_ENTRY:?}")))?;
    let t = &entry.tensor;
    if t.shape.len() != 3 {
        return Err(content_err(path, format!("image entry has rank {}", t.shape.len())));
    }
    ImageTensor::from_vec(t.shape[0], t.shape[1], t.shape[2], t.data.clone())
        .map_err(|e| content_err(path, e.to_string()))
}

/// Save a boolean mask as a 0.0/1.0 float vector.
pub fn save_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let data: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let tensor = Tensor::from_vec(&[mask.len()], data).map_err(|e| content_err(path, e.to_string()))?;
    save_entries(path, &[NamedTensor { name: MASK_ENTRY.into(), tensor }])
}

pub fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let entries = load_entries(path)?;
    let entry = entries
        .iter()
        .find(|e| e.name == MASK_ENTRY)
        .ok_or_else(|| content_err(path, format!("missing entry {MASK_ENTRY:?}")))?;
    entry
        .tensor
        .data
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(content_err(path, format!("mask value {other} is not 0 or 1"))),
        })
        .collect()
}

// ── Tests ────────────────────────────────────────────────────────────────────
