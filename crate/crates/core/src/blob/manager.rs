use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, info, warn};

use super::{size_stats, BlobError, BlobKey, BlobLocation, ManagerApi, SizeStats, TicketId, WriteTicket};
use crate::clock::{to_delta, SharedClock};

pub const INDEX_LOG: &str = "index.log";
const SEGMENT_PREFIX: &str = "seg-";

#[derive(Clone, Debug)]
pub struct ManagerConfig {
    /// Segment files roll once the next reservation would cross this size.
    pub segment_size: u64,
    pub ticket_ttl: Duration,
    pub max_total_bytes: Option<u64>,
    /// fsync the index log on every commit.
    pub fsync: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            segment_size: super::DEFAULT_SEGMENT_SIZE,
            ticket_ttl: Duration::from_secs(10 * 60),
            max_total_bytes: None,
            fsync: true,
        }
    }
}

// One JSON object per line in index.log.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum LogRecord {
    Reserve {
        ticket: TicketId,
        key: BlobKey,
        file: String,
        offset: u64,
        size: u64,
    },
    Commit {
        ticket: TicketId,
        key: BlobKey,
        file: String,
        offset: u64,
        size: u64,
        sha256: String,
    },
    Abandon {
        ticket: TicketId,
        file: String,
        offset: u64,
        size: u64,
        reason: String,
    },
}

/// A byte range that was reserved and never committed. Never re-issued.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hole {
    pub file_name: String,
    pub offset: u64,
    pub size: u64,
    pub reason: String,
}

/// Index contents reconstructed from the log (or copied from a live manager).
#[derive(Clone, Debug, Default)]
pub struct IndexSnapshot {
    pub entries: BTreeMap<BlobKey, BlobLocation>,
    pub holes: Vec<Hole>,
    /// Reservations with neither a commit nor an abandon record.
    pub dangling: Vec<Hole>,
    max_ticket: TicketId,
    max_segment: Option<u32>,
}

impl IndexSnapshot {
    /// Replays `index.log` under `root` without taking ownership of the store.
    /// A torn trailing line (crash mid-append) is ignored.
    pub fn load(root: &Path) -> Result<IndexSnapshot, BlobError> {
        let mut snap = IndexSnapshot::default();
        let path = root.join(INDEX_LOG);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(snap),
            Err(e) => return Err(e.into()),
        };
        let mut open: HashMap<TicketId, Hole> = HashMap::new();
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) if i == last => {
                    warn!(error = %e, "ignoring torn trailing index record");
                    continue;
                }
                Err(e) => {
                    return Err(BlobError::Protocol(format!(
                        "corrupt index log at line {}: {e}",
                        i + 1
                    )))
                }
            };
            match record {
                LogRecord::Reserve { ticket, file, offset, size, .. } => {
                    snap.note(ticket, &file);
                    open.insert(ticket, Hole { file_name: file, offset, size, reason: "dangling".into() });
                }
                LogRecord::Commit { ticket, key, file, offset, size, sha256 } => {
                    snap.note(ticket, &file);
                    open.remove(&ticket);
                    snap.entries.insert(
                        key,
                        BlobLocation { file_name: file, byte_offset: offset, num_bytes: size, checksum: sha256 },
                    );
                }
                LogRecord::Abandon { ticket, file, offset, size, reason } => {
                    snap.note(ticket, &file);
                    open.remove(&ticket);
                    snap.holes.push(Hole { file_name: file, offset, size, reason });
                }
            }
        }
        let mut dangling: Vec<Hole> = open.into_values().collect();
        dangling.sort_by(|a, b| (&a.file_name, a.offset).cmp(&(&b.file_name, b.offset)));
        snap.dangling = dangling;
        Ok(snap)
    }

    fn note(&mut self, ticket: TicketId, file: &str) {
        self.max_ticket = self.max_ticket.max(ticket);
        if let Some(n) = segment_number(file) {
            self.max_segment = Some(self.max_segment.map_or(n, |m| m.max(n)));
        }
    }

    pub fn lookup(&self, key: &BlobKey) -> Result<BlobLocation, BlobError> {
        self.entries
            .get(key)
            .cloned()
            .ok_or_else(|| BlobError::NotFound(key.clone()))
    }

    pub fn stats(&self, threshold: Option<u64>) -> SizeStats {
        size_stats(self.entries.values().map(|l| l.num_bytes), threshold)
    }

    /// Every pair of committed ranges in the same file is disjoint.
    pub fn find_overlap(&self) -> Option<(BlobKey, BlobKey)> {
        let mut by_file: BTreeMap<&str, Vec<(&BlobKey, &BlobLocation)>> = BTreeMap::new();
        for (key, loc) in &self.entries {
            by_file.entry(&loc.file_name).or_default().push((key, loc));
        }
        for ranges in by_file.values_mut() {
            ranges.sort_by_key(|(_, l)| l.byte_offset);
            for pair in ranges.windows(2) {
                if pair[0].1.end() > pair[1].1.byte_offset {
                    return Some((pair[0].0.clone(), pair[1].0.clone()));
                }
            }
        }
        None
    }
}

fn segment_number(file: &str) -> Option<u32> {
    file.strip_prefix(SEGMENT_PREFIX)?.parse().ok()
}

pub(crate) fn segment_name(n: u32) -> String {
    format!("{SEGMENT_PREFIX}{n}")
}

#[derive(Debug)]
struct Ticket {
    ticket: WriteTicket,
    committing: bool,
}

struct State {
    log: File,
    index: HashMap<BlobKey, BlobLocation>,
    tickets: HashMap<TicketId, Ticket>,
    holes: Vec<Hole>,
    next_ticket: TicketId,
    segment: u32,
    segment_end: u64,
    /// Bytes committed or reserved, holes included.
    allocated: u64,
}

/// The single authority over offsets, tickets and the key index.
pub struct BlobManager {
    root: PathBuf,
    config: ManagerConfig,
    clock: SharedClock,
    state: Mutex<State>,
}

impl BlobManager {
    /// Opens (or creates) a store. Recovery replays the index log; ranges
    /// reserved before the restart are recorded as holes and new
    /// reservations start in a fresh segment file, so a writer that outlived
    /// the previous manager can never overlap a new blob.
    pub fn open(root: impl Into<PathBuf>, config: ManagerConfig, clock: SharedClock) -> Result<Self, BlobError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let snap = IndexSnapshot::load(&root)?;

        let mut max_segment = snap.max_segment;
        for entry in fs::read_dir(&root)? {
            let name = entry?.file_name();
            if let Some(n) = name.to_str().and_then(segment_number) {
                max_segment = Some(max_segment.map_or(n, |m| m.max(n)));
            }
        }
        let segment = max_segment.map_or(0, |m| m + 1);

        let mut log = OpenOptions::new().create(true).append(true).open(root.join(INDEX_LOG))?;
        let mut holes = snap.holes.clone();
        for dangling in &snap.dangling {
            let record = LogRecord::Abandon {
                ticket: 0,
                file: dangling.file_name.clone(),
                offset: dangling.offset,
                size: dangling.size,
                reason: "manager-restart".into(),
            };
            append(&mut log, &record, false)?;
            holes.push(Hole { reason: "manager-restart".into(), ..dangling.clone() });
        }
        if !snap.dangling.is_empty() {
            log.sync_data()?;
        }

        let allocated = snap.entries.values().map(|l| l.num_bytes).sum::<u64>()
            + holes.iter().map(|h| h.size).sum::<u64>();
        info!(
            root = %root.display(),
            blobs = snap.entries.len(),
            holes = holes.len(),
            segment,
            "blob manager recovered"
        );

        Ok(BlobManager {
            root,
            config,
            clock,
            state: Mutex::new(State {
                log,
                index: snap.entries.into_iter().collect(),
                tickets: HashMap::new(),
                holes,
                next_ticket: snap.max_ticket + 1,
                segment,
                segment_end: 0,
                allocated,
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot(&self) -> IndexSnapshot {
        let state = self.state.lock().unwrap();
        IndexSnapshot {
            entries: state.index.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            holes: state.holes.clone(),
            dangling: state
                .tickets
                .values()
                .map(|t| Hole {
                    file_name: t.ticket.file_name.clone(),
                    offset: t.ticket.offset,
                    size: t.ticket.size,
                    reason: "open".into(),
                })
                .collect(),
            max_ticket: state.next_ticket.saturating_sub(1),
            max_segment: Some(state.segment),
        }
    }

    pub fn open_tickets(&self) -> usize {
        self.state.lock().unwrap().tickets.len()
    }

    fn abandon(&self, state: &mut State, ticket: &WriteTicket, reason: &str) -> Result<(), BlobError> {
        state.tickets.remove(&ticket.ticket_id);
        let record = LogRecord::Abandon {
            ticket: ticket.ticket_id,
            file: ticket.file_name.clone(),
            offset: ticket.offset,
            size: ticket.size,
            reason: reason.to_string(),
        };
        append(&mut state.log, &record, false)?;
        state.holes.push(Hole {
            file_name: ticket.file_name.clone(),
            offset: ticket.offset,
            size: ticket.size,
            reason: reason.to_string(),
        });
        debug!(ticket = ticket.ticket_id, reason, "write range abandoned");
        Ok(())
    }

    fn expire_tickets(&self, state: &mut State) -> Result<(), BlobError> {
        let now = self.clock.now();
        let expired: Vec<WriteTicket> = state
            .tickets
            .values()
            .filter(|t| !t.committing && t.ticket.expires_at <= now)
            .map(|t| t.ticket.clone())
            .collect();
        for ticket in expired {
            self.abandon(state, &ticket, "expired")?;
        }
        Ok(())
    }

    fn hash_range(&self, ticket: &WriteTicket) -> Result<String, BlobError> {
        let file = File::open(self.root.join(&ticket.file_name))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        let mut pos = 0u64;
        while pos < ticket.size {
            let want = (ticket.size - pos).min(buf.len() as u64) as usize;
            let n = file.read_at(&mut buf[..want], ticket.offset + pos)?;
            if n == 0 {
                return Ok(format!("short:{pos}"));
            }
            hasher.update(&buf[..n]);
            pos += n as u64;
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn append(log: &mut File, record: &LogRecord, sync: bool) -> Result<(), BlobError> {
    let mut line = serde_json::to_vec(record).map_err(|e| BlobError::Protocol(e.to_string()))?;
    line.push(b'\n');
    log.write_all(&line)?;
    if sync {
        log.sync_data()?;
    }
    Ok(())
}

impl ManagerApi for BlobManager {
    fn reserve(&self, key: &BlobKey, size: u64) -> Result<WriteTicket, BlobError> {
        if size == 0 {
            return Err(BlobError::ZeroLength);
        }
        let mut state = self.state.lock().unwrap();
        if state.index.contains_key(key) {
            return Err(BlobError::AlreadyStored(key.clone()));
        }
        self.expire_tickets(&mut state)?;
        if let Some(max) = self.config.max_total_bytes {
            if state.allocated + size > max {
                return Err(BlobError::StoreFull);
            }
        }

        if state.segment_end > 0 && state.segment_end + size > self.config.segment_size {
            state.segment += 1;
            state.segment_end = 0;
        }
        let ticket = WriteTicket {
            ticket_id: state.next_ticket,
            key: key.clone(),
            file_name: segment_name(state.segment),
            offset: state.segment_end,
            size,
            expires_at: self.clock.now() + to_delta(self.config.ticket_ttl),
        };
        state.next_ticket += 1;
        state.segment_end += size;
        state.allocated += size;

        let record = LogRecord::Reserve {
            ticket: ticket.ticket_id,
            key: key.clone(),
            file: ticket.file_name.clone(),
            offset: ticket.offset,
            size,
        };
        append(&mut state.log, &record, false)?;
        state.tickets.insert(ticket.ticket_id, Ticket { ticket: ticket.clone(), committing: false });
        debug!(ticket = ticket.ticket_id, key = %key, file = %ticket.file_name, offset = ticket.offset, size, "reserved");
        Ok(ticket)
    }

    fn commit(&self, ticket_id: TicketId, checksum: &str) -> Result<BlobLocation, BlobError> {
        let ticket = {
            let mut state = self.state.lock().unwrap();
            let Some(entry) = state.tickets.get_mut(&ticket_id) else {
                return Err(BlobError::UnknownTicket(ticket_id));
            };
            if entry.committing {
                return Err(BlobError::Protocol(format!("ticket {ticket_id} is already committing")));
            }
            let ticket = entry.ticket.clone();
            if ticket.expires_at <= self.clock.now() {
                self.abandon(&mut state, &ticket, "expired")?;
                return Err(BlobError::TicketExpired(ticket_id));
            }
            if state.index.contains_key(&ticket.key) {
                self.abandon(&mut state, &ticket, "duplicate")?;
                return Err(BlobError::AlreadyStored(ticket.key));
            }
            state.tickets.get_mut(&ticket_id).unwrap().committing = true;
            ticket
        };

        // Verify the written bytes outside the lock.
        let found = self.hash_range(&ticket);

        let mut state = self.state.lock().unwrap();
        let found = match found {
            Ok(found) => found,
            Err(e) => {
                self.abandon(&mut state, &ticket, "io-failure")?;
                return Err(e);
            }
        };
        if !found.eq_ignore_ascii_case(checksum) {
            self.abandon(&mut state, &ticket, "checksum-mismatch")?;
            return Err(BlobError::ChecksumMismatch {
                ticket: ticket_id,
                expected: checksum.to_string(),
                found,
            });
        }
        if state.index.contains_key(&ticket.key) {
            self.abandon(&mut state, &ticket, "duplicate")?;
            return Err(BlobError::AlreadyStored(ticket.key));
        }
        let location = BlobLocation {
            file_name: ticket.file_name.clone(),
            byte_offset: ticket.offset,
            num_bytes: ticket.size,
            checksum: found,
        };
        let record = LogRecord::Commit {
            ticket: ticket_id,
            key: ticket.key.clone(),
            file: location.file_name.clone(),
            offset: location.byte_offset,
            size: location.num_bytes,
            sha256: location.checksum.clone(),
        };
        append(&mut state.log, &record, self.config.fsync)?;
        state.tickets.remove(&ticket_id);
        state.index.insert(ticket.key.clone(), location.clone());
        debug!(ticket = ticket_id, key = %ticket.key, "committed");
        Ok(location)
    }

    fn lookup(&self, key: &BlobKey) -> Result<BlobLocation, BlobError> {
        self.state
            .lock()
            .unwrap()
            .index
            .get(key)
            .cloned()
            .ok_or_else(|| BlobError::NotFound(key.clone()))
    }

    fn stats(&self, threshold: Option<u64>) -> Result<SizeStats, BlobError> {
        let sizes: Vec<u64> = self.state.lock().unwrap().index.values().map(|l| l.num_bytes).collect();
        Ok(size_stats(sizes, threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blob::BlobWorker;
    use crate::clock::{parse_ts, SimClock};
    use std::sync::Arc;

    fn setup(config: ManagerConfig) -> (tempfile::TempDir, Arc<SimClock>, Arc<BlobManager>) {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        let manager = BlobManager::open(dir.path(), config, clock.clone()).unwrap();
        (dir, clock, Arc::new(manager))
    }

    fn key(s: &str) -> BlobKey {
        BlobKey::new(s)
    }

    #[test]
    fn reservations_append_in_segment() {
        let (_dir, _clock, m) = setup(ManagerConfig::default());
        let t1 = m.reserve(&key("a"), 100).unwrap();
        assert_eq!((t1.file_name.as_str(), t1.offset, t1.size), ("seg-0", 0, 100));
        let t2 = m.reserve(&key("b"), 50).unwrap();
        assert_eq!(t2.file_name, "seg-0");
        assert!(t2.offset >= 100);
    }

    #[test]
    fn zero_length_rejected() {
        let (_dir, _clock, m) = setup(ManagerConfig::default());
        assert!(matches!(m.reserve(&key("a"), 0), Err(BlobError::ZeroLength)));
    }

    #[test]
    fn committed_key_cannot_be_reserved() {
        let (dir, _clock, m) = setup(ManagerConfig::default());
        let worker = BlobWorker::new(m.clone(), dir.path());
        worker.put(&key("a"), b"hello").unwrap();
        assert!(matches!(m.reserve(&key("a"), 5), Err(BlobError::AlreadyStored(_))));
    }

    #[test]
    fn lookup_misses_until_commit() {
        let (dir, _clock, m) = setup(ManagerConfig::default());
        let t = m.reserve(&key("a"), 3).unwrap();
        let f = OpenOptions::new().create(true).write(true).open(dir.path().join(&t.file_name)).unwrap();
        f.write_all_at(b"abc", t.offset).unwrap();
        assert!(matches!(m.lookup(&key("a")), Err(BlobError::NotFound(_))));
        let loc = m.commit(t.ticket_id, &crate::blob::sha256_hex(b"abc")).unwrap();
        assert_eq!(m.lookup(&key("a")).unwrap(), loc);
    }

    #[test]
    fn expired_ticket_is_rejected() {
        let (dir, clock, m) = setup(ManagerConfig::default());
        let t = m.reserve(&key("a"), 3).unwrap();
        let f = OpenOptions::new().create(true).write(true).open(dir.path().join(&t.file_name)).unwrap();
        f.write_all_at(b"abc", t.offset).unwrap();
        clock.advance(Duration::from_secs(11 * 60));
        assert!(matches!(
            m.commit(t.ticket_id, &crate::blob::sha256_hex(b"abc")),
            Err(BlobError::TicketExpired(_))
        ));
        assert!(m.lookup(&key("a")).is_err());
        // The range is a hole now; the next reservation lands after it.
        let t2 = m.reserve(&key("a"), 3).unwrap();
        assert_eq!(t2.offset, 3);
    }

    #[test]
    fn wrong_digest_is_rejected_and_retryable() {
        let (dir, _clock, m) = setup(ManagerConfig::default());
        let t = m.reserve(&key("a"), 3).unwrap();
        let f = OpenOptions::new().create(true).write(true).open(dir.path().join(&t.file_name)).unwrap();
        f.write_all_at(b"abc", t.offset).unwrap();
        assert!(matches!(
            m.commit(t.ticket_id, &crate::blob::sha256_hex(b"xyz")),
            Err(BlobError::ChecksumMismatch { .. })
        ));
        assert!(m.lookup(&key("a")).is_err());
        let worker = BlobWorker::new(m.clone(), dir.path());
        worker.put(&key("a"), b"abc").unwrap();
    }

    #[test]
    fn segments_roll() {
        let (_dir, _clock, m) = setup(ManagerConfig { segment_size: 100, ..Default::default() });
        let a = m.reserve(&key("a"), 60).unwrap();
        let b = m.reserve(&key("b"), 60).unwrap();
        let c = m.reserve(&key("c"), 250).unwrap();
        let d = m.reserve(&key("d"), 10).unwrap();
        assert_eq!((a.file_name.as_str(), a.offset), ("seg-0", 0));
        assert_eq!((b.file_name.as_str(), b.offset), ("seg-1", 0));
        assert_eq!((c.file_name.as_str(), c.offset), ("seg-2", 0));
        assert_eq!((d.file_name.as_str(), d.offset), ("seg-3", 0));
    }

    #[test]
    fn store_full() {
        let (_dir, _clock, m) = setup(ManagerConfig { max_total_bytes: Some(10), ..Default::default() });
        m.reserve(&key("a"), 8).unwrap();
        assert!(matches!(m.reserve(&key("b"), 3), Err(BlobError::StoreFull)));
    }

    #[test]
    fn restart_recovers_index_and_never_reuses_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        let loc = {
            let m = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock.clone()).unwrap());
            let worker = BlobWorker::new(m.clone(), dir.path());
            let loc = worker.put(&key("a"), b"payload").unwrap();
            m.reserve(&key("b"), 4).unwrap();
            loc
        };
        let m = BlobManager::open(dir.path(), ManagerConfig::default(), clock).unwrap();
        assert_eq!(m.lookup(&key("a")).unwrap(), loc);
        assert!(m.lookup(&key("b")).is_err());
        let t = m.reserve(&key("b"), 4).unwrap();
        assert_eq!(t.file_name, "seg-1");
        let snap = m.snapshot();
        assert_eq!(snap.holes.len(), 1);
        assert!(snap.find_overlap().is_none());
    }

    #[test]
    fn torn_trailing_record_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2023-01-01T00:00:00Z").unwrap());
        {
            let m = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock.clone()).unwrap());
            BlobWorker::new(m.clone(), dir.path()).put(&key("a"), b"x").unwrap();
        }
        let mut log = OpenOptions::new().append(true).open(dir.path().join(INDEX_LOG)).unwrap();
        log.write_all(b"{\"op\":\"commit\",\"ticket\":9,\"key\":\"b").unwrap();
        let snap = IndexSnapshot::load(dir.path()).unwrap();
        assert_eq!(snap.entries.len(), 1);
    }
}
