//! Binary checkpoints with a checksummed payload.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "DEALCKPT" | u32 version | u64 seed | u64 len, config bytes
//! u64 entry count | per entry: u64 len, name bytes, u64 rows, u64 cols, f64 data
//! 32-byte SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::DenseMatrix;
use crate::tasks::TaskDataset;

pub const MAGIC: &[u8; 8] = b"DEALCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum does not match its contents")]
    ChecksumFailure,
    #[error("checkpoint i/o failed: {0}")]
    IoFailure(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// Echo of the configuration that produced the payload.
    pub config: String,
    pub entries: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    encode_with_version(ckpt, FORMAT_VERSION)
}

fn encode_with_version(ckpt: &Checkpoint, version: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    put_u64(&mut out, ckpt.seed);
    put_bytes(&mut out, ckpt.config.as_bytes());
    put_u64(&mut out, ckpt.entries.len() as u64);
    for (name, m) in &ckpt.entries {
        put_bytes(&mut out, name.as_bytes());
        put_u64(&mut out, m.rows() as u64);
        put_u64(&mut out, m.cols() as u64);
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("length overflow".into()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Malformed("missing magic header".into()));
    }
    let header = MAGIC.len() + 4;
    if bytes.len() < header {
        return Err(CheckpointError::ChecksumFailure);
    }
    let version = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < header + DIGEST_LEN {
        return Err(CheckpointError::ChecksumFailure);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumFailure);
    }
    let mut r = Reader { buf: body, pos: header };
    let seed = r.u64()?;
    let config = r.string()?;
    let count = r.len()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.len()?;
        let cols = r.len()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Malformed("matrix size overflow".into()))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = DenseMatrix::new(rows, cols, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        entries.push((name, m));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Checkpoint { seed, config, entries })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode(ckpt)).map_err(|e| CheckpointError::IoFailure(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::IoFailure(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Named matrices of a dataset, so a run's inputs can be stored alongside
/// its results.
pub fn dataset_entries(ds: &TaskDataset) -> Vec<(String, DenseMatrix)> {
    [
        ("q_train", &ds.q_train),
        ("g_train", &ds.g_train),
        ("q_test", &ds.q_test),
        ("g_test", &ds.g_test),
        ("label_map", &ds.label_map),
    ]
    .into_iter()
    .map(|(k, m)| (format!("{}.{k}", ds.name), m.clone()))
    .collect()
}
