//! Binary codecs for checkpoints ("PEBM") and image datasets ("PIMG").
//!
//! Both formats are little-endian and fully validated: a decoder consumes the
//! whole payload or reports exactly what is wrong (truncated, oversized,
//! malformed). Encoding is canonical, so decode-then-encode reproduces the
//! input bytes bit for bit.
//!
//! Checkpoint layout: magic "PEBM", version u32, entry count u32; each entry
//! is name length u16, UTF-8 name, rank u8, one u32 per dimension, then the
//! row-major f32 payload.
//!
//! Dataset layout: magic "PIMG", version u32, record count u32, then C, H, W
//! as u32; each record is 1 label byte followed by C*H*W pixel bytes
//! (channel-planar row-major). Pixels dequantize to float as v/255.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::{ImageTensor, NamedTensor, Tensor};

pub const PEBM_MAGIC: [u8; 4] = *b"PEBM";
pub const PEBM_VERSION: u32 = 1;
pub const PIMG_MAGIC: [u8; 4] = *b"PIMG";
pub const PIMG_VERSION: u32 = 1;

/// Names with this prefix are sidecar records (metadata, bank images), not
/// network parameters.
pub const SIDECAR_PREFIX: &str = "__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecError {
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion { found: u32 },
    /// The payload ended before `needed` more bytes could be read.
    Truncated { needed: usize, available: usize },
    /// Bytes remained after the declared content.
    TrailingBytes { extra: usize },
    /// An entry name that is not valid UTF-8.
    BadName,
    /// Declared dimensions overflow addressable memory.
    Overflow,
    /// Inconsistent arguments on the encode side.
    Inconsistent(&'static str),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                core::str::from_utf8(expected).unwrap_or("?"),
                found
            ),
            CodecError::UnsupportedVersion { found } => {
                write!(f, "unsupported format version {found}")
            }
            CodecError::Truncated { needed, available } => {
                write!(f, "truncated payload: needed {needed} bytes, {available} available")
            }
            CodecError::TrailingBytes { extra } => {
                write!(f, "{extra} unexpected trailing bytes")
            }
            CodecError::BadName => write!(f, "entry name is not valid UTF-8"),
            CodecError::Overflow => write!(f, "declared dimensions overflow"),
            CodecError::Inconsistent(msg) => write!(f, "inconsistent input: {msg}"),
        }
    }
}

impl core::error::Error for CodecError {}

// ── Byte cursor ─────────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CodecError::Truncated { needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<(), CodecError> {
        let extra = self.bytes.len() - self.pos;
        if extra != 0 {
            return Err(CodecError::TrailingBytes { extra });
        }
        Ok(())
    }
}

fn expect_magic(cur: &mut Cursor<'_>, expected: [u8; 4]) -> Result<(), CodecError> {
    let got = cur.take(4)?;
    if got != expected {
        return Err(CodecError::BadMagic { expected, found: [got[0], got[1], got[2], got[3]] });
    }
    Ok(())
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

pub fn encode_checkpoint(entries: &[NamedTensor]) -> Result<Vec<u8>, CodecError> {
    if entries.len() > u32::MAX as usize {
        return Err(CodecError::Inconsistent("too many entries"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&PEBM_MAGIC);
    out.extend_from_slice(&PEBM_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CodecError::Inconsistent("entry name too long"));
        }
        if e.tensor.shape.len() > u8::MAX as usize {
            return Err(CodecError::Inconsistent("tensor rank too large"));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.tensor.shape.len() as u8);
        for &d in &e.tensor.shape {
            if d > u32::MAX as usize {
                return Err(CodecError::Inconsistent("dimension too large"));
            }
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>, CodecError> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, PEBM_MAGIC)?;
    let version = cur.u32()?;
    if version != PEBM_VERSION {
        return Err(CodecError::UnsupportedVersion { found: version });
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = core::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CodecError::BadName)?
            .into();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1u64;
        for _ in 0..rank {
            let d = cur.u32()? as u64;
            numel = numel.checked_mul(d).ok_or(CodecError::Overflow)?;
            shape.push(d as usize);
        }
        let payload_bytes =
            usize::try_from(numel.checked_mul(4).ok_or(CodecError::Overflow)?)
                .map_err(|_| CodecError::Overflow)?;
        let raw = cur.take(payload_bytes)?;
        let mut data = Vec::with_capacity(numel as usize);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        entries.push(NamedTensor { name, tensor: Tensor { shape, data } });
    }
    cur.finish()?;
    Ok(entries)
}

// ── Datasets ────────────────────────────────────────────────────────────────

/// Round a float pixel to its byte code, clamping into [0, 1] first.
pub fn quantize(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

pub fn encode_dataset(images: &[ImageTensor], labels: &[u8]) -> Result<Vec<u8>, CodecError> {
    if images.len() != labels.len() {
        return Err(CodecError::Inconsistent("image and label counts differ"));
    }
    if images.len() > u32::MAX as usize {
        return Err(CodecError::Inconsistent("too many records"));
    }
    let (c, h, w) = images.first().map(|i| i.shape()).unwrap_or((0, 0, 0));
    if images.iter().any(|i| i.shape() != (c, h, w)) {
        return Err(CodecError::Inconsistent("images have mixed shapes"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&PIMG_MAGIC);
    out.extend_from_slice(&PIMG_VERSION.to_le_bytes());
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    for d in [c, h, w] {
        if d > u32::MAX as usize {
            return Err(CodecError::Inconsistent("dimension too large"));
        }
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (img, &label) in images.iter().zip(labels) {
        out.push(label);
        for &v in &img.data {
            out.push(quantize(v));
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<ImageTensor>, Vec<u8>), CodecError> {
    let mut cur = Cursor::new(bytes);
    expect_magic(&mut cur, PIMG_MAGIC)?;
    let version = cur.u32()?;
    if version != PIMG_VERSION {
        return Err(CodecError::UnsupportedVersion { found: version });
    }
    let count = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let pixels = (c as u64)
        .checked_mul(h as u64)
        .and_then(|v| v.checked_mul(w as u64))
        .ok_or(CodecError::Overflow)?;
    let pixels = usize::try_from(pixels).map_err(|_| CodecError::Overflow)?;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    let mut labels = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        labels.push(cur.u8()?);
        let raw = cur.take(pixels)?;
        let mut data = Vec::with_capacity(pixels);
        for &b in raw {
            data.push(dequantize(b));
        }
        images.push(ImageTensor { c, h, w, data });
    }
    cur.finish()?;
    Ok((images, labels))
}

// ── Sidecar text entries ────────────────────────────────────────────────────

/// Pack a UTF-8 text record as a rank-1 checkpoint entry, one byte per value.
/// Keeps metadata inside the checkpoint format without extending it.
pub fn text_entry(name: &str, text: &str) -> NamedTensor {
    let data: Vec<f32> = text.bytes().map(|b| b as f32).collect();
    let shape = alloc::vec![data.len()];
    NamedTensor { name: name.into(), tensor: Tensor { shape, data } }
}

/// Recover the text of a sidecar entry written by `text_entry`.
pub fn entry_text(entry: &NamedTensor) -> Option<String> {
    let mut bytes = Vec::with_capacity(entry.tensor.data.len());
    for &v in &entry.tensor.data {
        if v < 0.0 || v > 255.0 || libm::roundf(v) != v {
            return None;
        }
        bytes.push(v as u8);
    }
    String::from_utf8(bytes).ok()
}

// ── Tests ───────────────────────────────────────────────────────────────────
