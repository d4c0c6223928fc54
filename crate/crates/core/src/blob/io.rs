use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{BlobError, BlobKey, BlobLocation, ManagerApi};

/// Writer/reader side of the store. Many workers may share one manager; each
/// writes only inside the range its ticket grants.
#[derive(Clone)]
pub struct BlobWorker {
    manager: Arc<dyn ManagerApi>,
    root: PathBuf,
    fsync: bool,
}

impl BlobWorker {
    pub fn new(manager: Arc<dyn ManagerApi>, root: impl Into<PathBuf>) -> Self {
        BlobWorker { manager, root: root.into(), fsync: true }
    }

    pub fn with_fsync(mut self, fsync: bool) -> Self {
        self.fsync = fsync;
        self
    }

    pub fn manager(&self) -> &Arc<dyn ManagerApi> {
        &self.manager
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&self, key: &BlobKey, bytes: &[u8]) -> Result<BlobLocation, BlobError> {
        self.put_reader(key, bytes.len() as u64, bytes)
    }

    /// Streams exactly `size` bytes from `reader` into a reserved range.
    /// Short input leaves the ticket to expire and reports `ShortWrite`.
    pub fn put_reader(&self, key: &BlobKey, size: u64, mut reader: impl Read) -> Result<BlobLocation, BlobError> {
        let ticket = self.manager.reserve(key, size)?;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(self.root.join(&ticket.file_name))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 256 * 1024];
        let mut written = 0u64;
        while written < size {
            let want = (size - written).min(buf.len() as u64) as usize;
            let n = reader.read(&mut buf[..want])?;
            if n == 0 {
                return Err(BlobError::ShortWrite { expected: size, actual: written });
            }
            file.write_all_at(&buf[..n], ticket.offset + written)?;
            hasher.update(&buf[..n]);
            written += n as u64;
        }
        if self.fsync {
            file.sync_data()?;
        }
        self.manager.commit(ticket.ticket_id, &hex::encode(hasher.finalize()))
    }

    pub fn get(&self, key: &BlobKey) -> Result<Vec<u8>, BlobError> {
        let location = self.manager.lookup(key)?;
        read_blob(&self.root, &location)
    }

    /// Copies one blob to `dest`, verifying its digest first.
    pub fn cp(&self, key: &BlobKey, dest: &Path) -> Result<BlobLocation, BlobError> {
        let location = self.manager.lookup(key)?;
        let bytes = read_blob(&self.root, &location)?;
        let mut out = File::create(dest)?;
        out.write_all(&bytes)?;
        out.sync_all()?;
        Ok(location)
    }
}

/// Reads a committed range and checks it against the recorded digest.
pub fn read_blob(root: &Path, location: &BlobLocation) -> Result<Vec<u8>, BlobError> {
    let file = File::open(root.join(&location.file_name))?;
    let mut bytes = vec![0u8; location.num_bytes as usize];
    let mut pos = 0usize;
    while pos < bytes.len() {
        let n = file.read_at(&mut bytes[pos..], location.byte_offset + pos as u64)?;
        if n == 0 {
            break;
        }
        pos += n;
    }
    let found = if pos < bytes.len() {
        format!("truncated at {pos} bytes")
    } else {
        hex::encode(Sha256::digest(&bytes))
    };
    if found != location.checksum {
        return Err(BlobError::Corruption {
            file_name: location.file_name.clone(),
            offset: location.byte_offset,
            expected: location.checksum.clone(),
            found,
        });
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blob::{BlobManager, ManagerConfig};
    use crate::clock::{parse_ts, SimClock};

    #[test]
    fn put_get_cp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        let m = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock).unwrap());
        let w = BlobWorker::new(m, dir.path());
        let k = BlobKey::new("p@1.0.0#00");
        w.put(&k, b"tarball bytes").unwrap();
        assert_eq!(w.get(&k).unwrap(), b"tarball bytes");
        let dest = dir.path().join("out.tgz");
        w.cp(&k, &dest).unwrap();
        assert_eq!(std::fs::read(dest).unwrap(), b"tarball bytes");
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        let m = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock).unwrap());
        let w = BlobWorker::new(m, dir.path());
        let k = BlobKey::new("k");
        let loc = w.put(&k, b"abcdef").unwrap();
        let f = OpenOptions::new().write(true).open(dir.path().join(&loc.file_name)).unwrap();
        f.write_all_at(b"X", loc.byte_offset + 2).unwrap();
        assert!(matches!(w.get(&k), Err(BlobError::Corruption { .. })));
    }

    #[test]
    fn short_reader_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        let m = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock).unwrap());
        let w = BlobWorker::new(m.clone(), dir.path());
        let err = w.put_reader(&BlobKey::new("k"), 10, &b"abc"[..]).unwrap_err();
        assert!(matches!(err, BlobError::ShortWrite { expected: 10, actual: 3 }));
        assert!(m.lookup(&BlobKey::new("k")).is_err());
    }
}
