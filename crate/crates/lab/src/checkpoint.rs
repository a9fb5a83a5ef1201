//! The `FPDLAB` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FPDLAB" | version u32 | fingerprint u64 | block count u32
//! per block:   name | tensor count u32 | tensors | sha256 of the block body
//! per tensor:  name | rank u32 | dims u64* | values f64*
//! name:        byte length u32 | utf-8 bytes
//! ```
//!
//! The checksum covers everything in the block after its name.

use std::path::Path;

use fpd_core::autodiff::Tensor;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 6] = b"FPDLAB";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not an FPDLAB checkpoint")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch in block {0:?}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no block {0:?}")]
    MissingBlock(String),
    #[error("checkpoint {path} was written for a different configuration (fingerprint {found:016x}, expected {expected:016x})")]
    Fingerprint {
        path: String,
        found: u64,
        expected: u64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Tensors = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub blocks: Vec<(String, Tensors)>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn encode_block(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_name(&mut body, name);
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    body
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.name()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name:?} is too large")))?;
        let bytes = self.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn new(fingerprint: u64) -> Self {
        Self {
            fingerprint,
            blocks: Vec::new(),
        }
    }

    pub fn with_block(mut self, name: &str, tensors: Tensors) -> Self {
        self.blocks.push((name.to_string(), tensors));
        self
    }

    pub fn block(&self, name: &str) -> Result<&[(String, Tensor)], CheckpointError> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| CheckpointError::MissingBlock(name.to_string()))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, tensors) in &self.blocks {
            put_name(&mut out, name);
            let body = encode_block(tensors);
            out.extend_from_slice(&body);
            out.extend_from_slice(&Sha256::digest(&body));
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, at: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint = r.u64()?;
        let count = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name = r.name()?;
            let start = r.at;
            let n = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n {
                tensors.push(r.tensor()?);
            }
            let body = &buf[start..r.at];
            if r.take(32)? != Sha256::digest(body).as_slice() {
                return Err(CheckpointError::Checksum(name));
            }
            blocks.push((name, tensors));
        }
        if r.at != buf.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self { fingerprint, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    /// Loads and requires the stored fingerprint to equal `expected`.
    pub fn load_expecting(path: &Path, expected: u64) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.fingerprint != expected {
            return Err(CheckpointError::Fingerprint {
                path: path.display().to_string(),
                found: ck.fingerprint,
                expected,
            });
        }
        Ok(ck)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}
