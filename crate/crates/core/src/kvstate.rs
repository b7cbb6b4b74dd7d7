//! KV cache as process state: checkpoint, restore, fork.
//!
//! # AKVC file layout (little-endian)
//!
//! | field              | encoding                         |
//! |--------------------|----------------------------------|
//! | magic              | `b"AKVC"`                        |
//! | version            | u16 (currently 1)                |
//! | model_name         | u32 byte length + UTF-8 bytes    |
//! | layer_count        | u32                              |
//! | bytes_per_position | u64                              |
//! | position           | u64                              |
//! | payload            | `position * bytes_per_position`  |
//! | crc32              | u32 over every preceding byte    |

use std::path::Path;

use crate::backend::{BackendError, Session};

/// 32 MiB.
pub const MAX_CHECKPOINT_BYTES: u64 = 32 * (1 << 20);

pub const MAGIC: &[u8; 4] = b"AKVC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("checkpoint of {size} bytes exceeds the {cap}-byte cap")]
    CheckpointTooLarge { size: u64, cap: u64 },
    #[error("checkpoint size overflows: {position} positions x {bytes_per_position} bytes")]
    SizeOverflow {
        position: u64,
        bytes_per_position: u64,
    },
    #[error("checkpoint {field} is {found}, live model has {expected}")]
    DimensionMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("not an AKVC file")]
    BadMagic,
    #[error("unsupported AKVC version {0}")]
    UnsupportedVersion(u16),
    #[error("AKVC file truncated")]
    Truncated,
    #[error("AKVC file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("AKVC checksum mismatch")]
    CrcMismatch,
    #[error("model name is not UTF-8")]
    InvalidName,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCheckpoint {
    pub model_name: String,
    pub layer_count: u32,
    pub bytes_per_position: u64,
    pub position: u64,
    pub payload: Vec<u8>,
}

fn checked_size(position: u64, bytes_per_position: u64, cap: u64) -> Result<u64, KvError> {
    let size = position
        .checked_mul(bytes_per_position)
        .ok_or(KvError::SizeOverflow {
            position,
            bytes_per_position,
        })?;
    if size > cap {
        return Err(KvError::CheckpointTooLarge { size, cap });
    }
    Ok(size)
}

/// Snapshot of the session's KV state. Later session mutation does not
/// affect it.
pub fn kv_checkpoint<S: Session + ?Sized>(session: &S) -> Result<KvCheckpoint, KvError> {
    kv_checkpoint_with_cap(session, MAX_CHECKPOINT_BYTES)
}

pub fn kv_checkpoint_with_cap<S: Session + ?Sized>(
    session: &S,
    cap: u64,
) -> Result<KvCheckpoint, KvError> {
    let id = session.identity();
    let position = session.position();
    let size = checked_size(position, id.bytes_per_position, cap)?;
    let payload = session.export_kv();
    debug_assert_eq!(payload.len() as u64, size);
    Ok(KvCheckpoint {
        model_name: id.name.clone(),
        layer_count: id.layer_count,
        bytes_per_position: id.bytes_per_position,
        position,
        payload,
    })
}

/// Same snapshot as [`kv_checkpoint`]; by convention the original session
/// keeps running while the copy seeds another context.
pub fn kv_fork<S: Session + ?Sized>(session: &S) -> Result<KvCheckpoint, KvError> {
    kv_checkpoint(session)
}

/// Replaces the session's KV state after checking the checkpoint was taken
/// from the same model.
pub fn kv_restore<S: Session + ?Sized>(
    session: &mut S,
    checkpoint: &KvCheckpoint,
) -> Result<(), KvError> {
    let id = session.identity();
    if checkpoint.model_name != id.name {
        return Err(KvError::DimensionMismatch {
            field: "model_name",
            expected: id.name.clone(),
            found: checkpoint.model_name.clone(),
        });
    }
    if checkpoint.layer_count != id.layer_count {
        return Err(KvError::DimensionMismatch {
            field: "layer_count",
            expected: id.layer_count.to_string(),
            found: checkpoint.layer_count.to_string(),
        });
    }
    if checkpoint.bytes_per_position != id.bytes_per_position {
        return Err(KvError::DimensionMismatch {
            field: "bytes_per_position",
            expected: id.bytes_per_position.to_string(),
            found: checkpoint.bytes_per_position.to_string(),
        });
    }
    checked_size(
        checkpoint.position,
        checkpoint.bytes_per_position,
        MAX_CHECKPOINT_BYTES,
    )?;
    session.import_kv(checkpoint.position, &checkpoint.payload)?;
    Ok(())
}

impl KvCheckpoint {
    pub fn size(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.model_name.as_bytes();
        let mut out = Vec::with_capacity(34 + name.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.layer_count.to_le_bytes());
        out.extend_from_slice(&self.bytes_per_position.to_le_bytes());
        out.extend_from_slice(&self.position.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KvError> {
        if bytes.len() < 4 {
            return Err(KvError::Truncated);
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body };
        if r.take(4)? != MAGIC {
            return Err(KvError::BadMagic);
        }
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(KvError::CrcMismatch);
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(KvError::UnsupportedVersion(version));
        }
        let name_len = u32::from_le_bytes(r.array()?) as usize;
        let model_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| KvError::InvalidName)?
            .to_owned();
        let layer_count = u32::from_le_bytes(r.array()?);
        let bytes_per_position = u64::from_le_bytes(r.array()?);
        let position = u64::from_le_bytes(r.array()?);
        let size = checked_size(position, bytes_per_position, MAX_CHECKPOINT_BYTES)?;
        let payload = r.take(size as usize)?.to_vec();
        if !r.buf.is_empty() {
            return Err(KvError::TrailingBytes(r.buf.len()));
        }
        Ok(Self {
            model_name,
            layer_count,
            bytes_per_position,
            position,
            payload,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), KvError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, KvError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], KvError> {
        if self.buf.len() < n {
            return Err(KvError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], KvError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}
