//! `.sddw` weight bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "SDDW"
//! version      u32      currently 1
//! fingerprint  u64      ModelConfig::fingerprint of the producing config
//! count        u32      number of tensors
//! count x {
//!     name_len u32
//!     name     name_len bytes, UTF-8
//!     rank     u32
//!     dims     rank x u32
//!     values   prod(dims) x f32
//! }
//! ```
//!
//! Tensors are written in name order, so saving is deterministic.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::config::ModelConfig;

pub const MAGIC: [u8; 4] = *b"SDDW";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("bad magic: not a .sddw weight file")]
    BadMagic,
    #[error("unsupported weight format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error(
        "truncated weight file: needed {needed} bytes at offset {offset}, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("weights do not match the model config:\n{0}")]
    Validation(ValidationReport),
}

/// FNV-1a hash over tensor names and shapes.
pub fn fingerprint_specs(specs: &[(String, Vec<usize>)]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, shape) in specs {
        eat(name.as_bytes());
        for &d in shape {
            eat(&(d as u32).to_le_bytes());
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsBundle {
    pub version: u32,
    pub fingerprint: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl WeightsBundle {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            fingerprint,
            tensors: BTreeMap::new(),
        }
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        self.tensors.insert(name.into(), Tensor { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> ValidationReport {
        self.validate_specs(&config.tensor_specs(), config.fingerprint())
    }

    /// Check against an explicit list of demanded tensor names and shapes.
    pub fn validate_specs(
        &self,
        demanded: &[(String, Vec<usize>)],
        fingerprint: u64,
    ) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (name, shape) in demanded {
            match self.tensors.get(name) {
                None => report.missing.push(name.clone()),
                Some(t) if &t.shape != shape => report.misshaped.push(Mismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                }),
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !demanded.iter().any(|(n, _)| n == name) {
                report.extra.push(name.clone());
            }
        }
        report.fingerprint_mismatch = self.fingerprint != fingerprint;
        report
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.param_count() as usize * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(WeightsError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let fingerprint = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut bundle = WeightsBundle::new(fingerprint);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::Corrupt("tensor name is not valid UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(WeightsError::Corrupt(format!(
                    "tensor {name} has rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| WeightsError::Corrupt(format!("tensor {name} is too large")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if bundle.tensors.contains_key(&name) {
                return Err(WeightsError::Corrupt(format!("duplicate tensor {name}")));
            }
            bundle.tensors.insert(name, Tensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(bundle)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

/// Differences between a bundle and the tensors a config demands.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    pub misshaped: Vec<Mismatch>,
    /// Informational; shapes decide validity.
    pub fingerprint_mismatch: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.misshaped.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    /// Lists at most twelve offending tensors; `{:#}` lists all of them.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let limit = if f.alternate() { usize::MAX } else { 12 };
        let lines = self
            .missing
            .iter()
            .map(|n| format!("  missing   {n}"))
            .chain(self.extra.iter().map(|n| format!("  extra     {n}")))
            .chain(self.misshaped.iter().map(|m| {
                format!(
                    "  misshaped {} expected {:?} found {:?}",
                    m.name, m.expected, m.found
                )
            }));
        let total = self.missing.len() + self.extra.len() + self.misshaped.len();
        for line in lines.take(limit) {
            writeln!(f, "{line}")?;
        }
        if total > limit {
            writeln!(f, "  ... and {} more", total - limit)?;
        }
        if self.fingerprint_mismatch {
            writeln!(f, "  (config fingerprint differs)")?;
        }
        Ok(())
    }
}
