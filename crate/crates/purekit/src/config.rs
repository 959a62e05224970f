//! Key=value run configuration: file parsing, flag/file/default layering,
//! and the config echo written next to every artifact.
//!
//! Precedence is strict: an explicit command-line flag beats the config
//! file, which beats the built-in default. Unknown keys in a config file
//! are an error, not a warning, so a typo cannot silently fall back to a
//! default. The echo file a command writes is itself a valid config file:
//! feeding it back with the same inputs reproduces the artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use purekit_core::rng::fnv1a64;

use crate::io::{read_bytes, write_atomic, IoError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}, line {line}: expected key=value, got {text:?}")]
    Syntax { path: PathBuf, line: usize, text: String },
    #[error("{path}: unknown key {key:?}")]
    UnknownKey { path: PathBuf, key: String },
    #[error("{path}: duplicate key {key:?}")]
    DuplicateKey { path: PathBuf, key: String },
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue { key: String, value: String, wanted: &'static str },
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// A parsed config file: ordered key=value pairs with consumption
/// tracking, so unread keys can be rejected after resolution.
#[derive(Debug, Default)]
pub struct ConfigFile {
    path: PathBuf,
    values: BTreeMap<String, String>,
    consumed: BTreeMap<String, bool>,
}

impl ConfigFile {
    /// An empty file stand-in for runs configured by flags alone.
    pub fn empty() -> Self {
        ConfigFile::default()
    }

    /// Parse `key=value` lines. Blank lines and `#` comments are skipped,
    /// whitespace around keys and values is trimmed.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Self::from_text(&String::from_utf8_lossy(&bytes), path)
    }

    /// Parse config text that came from somewhere other than a standalone
    /// file (checkpoint metadata, say); `path` labels errors.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut consumed = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    path: path.to_path_buf(),
                    line: i + 1,
                    text: line.into(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey { path: path.to_path_buf(), key });
            }
            consumed.insert(key, false);
        }
        Ok(ConfigFile { path: path.to_path_buf(), values, consumed })
    }

    /// Resolve one setting: the flag value if given, else the file value,
    /// else the default. Reading a key marks it consumed.
    pub fn resolve<T: FromStr + Clone>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        let file_value = self.take(key)?;
        if let Some(v) = flag {
            return Ok(v);
        }
        match file_value {
            Some(v) => Ok(v),
            None => Ok(default),
        }
    }

    /// Like `resolve` but with no default: returns None when neither the
    /// flag nor the file provides the key.
    pub fn resolve_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let file_value = self.take(key)?;
        if flag.is_some() {
            return Ok(flag);
        }
        Ok(file_value)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        if let Some(c) = self.consumed.get_mut(key) {
            *c = true;
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: raw.clone(),
                wanted: std::any::type_name::<T>(),
            }),
        }
    }

    /// Error on any key the resolution pass never asked for.
    pub fn finish(self) -> Result<()> {
        for (key, used) in &self.consumed {
            if !used {
                return Err(ConfigError::UnknownKey { path: self.path.clone(), key: key.clone() });
            }
        }
        Ok(())
    }
}

// ── Config echo ──────────────────────────────────────────────────────────────

/// The fully resolved settings of one run, written next to its outputs.
/// Input files are recorded as comment lines with FNV-1a content hashes,
/// so provenance survives file moves and renames.
#[derive(Debug, Default)]
pub struct Echo {
    command: String,
    pairs: Vec<(String, String)>,
    inputs: Vec<(PathBuf, u64)>,
}

impl Echo {
    pub fn new(command: &str) -> Self {
        Echo { command: command.into(), pairs: Vec::new(), inputs: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.pairs.push((key.into(), value.to_string()));
        self
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    /// Record an input artifact by path and content hash.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = read_bytes(path)?;
        self.inputs.push((path.to_path_buf(), fnv1a64(&bytes)));
        Ok(self)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# purekit {} config echo", self.command);
        for (path, hash) in &self.inputs {
            let _ = writeln!(out, "# input {} fnv1a64={hash:016x}", path.display());
        }
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Write the echo as `<artifact>.echo` next to the given output.
    pub fn write_beside(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".echo");
        write_atomic(Path::new(&name), self.render().as_bytes())?;
        Ok(())
    }
}

// ── Tests ────────────────────────────────────────────────────────────────────
