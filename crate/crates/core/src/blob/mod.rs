//! Append-only tarball storage on a shared file system.
//!
//! A single [`BlobManager`] owns the key index and hands out byte ranges in
//! segment files (`seg-0`, `seg-1`, ...). Writers reserve a range, write the
//! bytes themselves with positional I/O, then commit with a digest. A key
//! becomes visible only once its commit record is durable in the index log.
//! Readers ask the manager for a [`BlobLocation`] and read the range
//! directly; see [`BlobWorker`].
//!
//! The manager can run in-process or behind the length-prefixed TCP protocol
//! in [`protocol`].

mod io;
mod manager;
pub mod protocol;
mod stats;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Timestamp;

pub use io::{read_blob, BlobWorker};
pub use manager::{BlobManager, IndexSnapshot, ManagerConfig};
pub use protocol::{serve_manager, ManagerServer, RemoteManager};
pub use stats::{size_stats, SizeStats, ThresholdStats};

pub const DEFAULT_SEGMENT_SIZE: u64 = 1 << 30;

/// Stable identifier of one archived tarball.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobKey(String);

impl BlobKey {
    pub fn new(key: impl Into<String>) -> Self {
        BlobKey(key.into())
    }

    /// `name@version#<first 16 hex of sha256(url)>`. The URL hash keeps a
    /// republished tarball at a new URL distinct from the original.
    pub fn for_tarball(package: &str, version: &str, url: &str) -> Self {
        let digest = hex::encode(Sha256::digest(url.as_bytes()));
        BlobKey(format!("{package}@{version}#{}", &digest[..16]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobLocation {
    pub file_name: String,
    pub byte_offset: u64,
    pub num_bytes: u64,
    /// Hex SHA-256 of the blob contents.
    pub checksum: String,
}

impl BlobLocation {
    pub fn end(&self) -> u64 {
        self.byte_offset + self.num_bytes
    }
}

pub type TicketId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteTicket {
    pub ticket_id: TicketId,
    pub key: BlobKey,
    pub file_name: String,
    pub offset: u64,
    pub size: u64,
    pub expires_at: Timestamp,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("key {0} is already stored")]
    AlreadyStored(BlobKey),
    #[error("store is full")]
    StoreFull,
    #[error("blob size must be positive")]
    ZeroLength,
    #[error("key {0} not found")]
    NotFound(BlobKey),
    #[error("ticket {0} expired")]
    TicketExpired(TicketId),
    #[error("ticket {0} is unknown")]
    UnknownTicket(TicketId),
    #[error("checksum mismatch for ticket {ticket}: expected {expected}, found {found}")]
    ChecksumMismatch {
        ticket: TicketId,
        expected: String,
        found: String,
    },
    #[error("corrupt blob in {file_name} at {offset}: expected {expected}, found {found}")]
    Corruption {
        file_name: String,
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("short write: expected {expected} bytes, got {actual}")]
    ShortWrite { expected: u64, actual: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BlobError {
    /// Stable machine-readable kind, also used on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            BlobError::AlreadyStored(_) => "already-stored",
            BlobError::StoreFull => "store-full",
            BlobError::ZeroLength => "zero-length",
            BlobError::NotFound(_) => "not-found",
            BlobError::TicketExpired(_) => "ticket-expired",
            BlobError::UnknownTicket(_) => "unknown-ticket",
            BlobError::ChecksumMismatch { .. } => "checksum-mismatch",
            BlobError::Corruption { .. } => "corruption",
            BlobError::ShortWrite { .. } => "short-write",
            BlobError::Protocol(_) => "protocol",
            BlobError::Io(_) => "io-failure",
        }
    }
}

/// Operations served by the manager, locally or over the wire.
pub trait ManagerApi: Send + Sync {
    fn reserve(&self, key: &BlobKey, size: u64) -> Result<WriteTicket, BlobError>;
    fn commit(&self, ticket: TicketId, checksum: &str) -> Result<BlobLocation, BlobError>;
    fn lookup(&self, key: &BlobKey) -> Result<BlobLocation, BlobError>;
    fn stats(&self, threshold: Option<u64>) -> Result<SizeStats, BlobError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_derivation_is_stable() {
        let a = BlobKey::for_tarball("lib", "1.0.0", "https://r/lib-1.0.0.tgz");
        let b = BlobKey::for_tarball("lib", "1.0.0", "https://r/lib-1.0.0.tgz");
        let c = BlobKey::for_tarball("lib", "1.0.0", "https://mirror/lib-1.0.0.tgz");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.as_str().starts_with("lib@1.0.0#"));
        assert_eq!(a.as_str().len(), "lib@1.0.0#".len() + 16);
    }
}
