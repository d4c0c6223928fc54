use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::Serialize;

use crate::blob::{BlobKey, BlobLocation};
use crate::clock::{format_ts, parse_ts, to_delta, SharedClock, Timestamp};
use crate::store::{Result, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Leased,
    Done,
    Missing,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 5] = [JobState::Queued, JobState::Leased, JobState::Done, JobState::Missing, JobState::Failed];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Leased => "leased",
            JobState::Done => "done",
            JobState::Missing => "missing",
            JobState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Missing | JobState::Failed)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        JobState::ALL.into_iter().find(|j| j.as_str() == s).ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lease {
    pub worker_id: String,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownloadJob {
    pub job_id: i64,
    pub blob_key: BlobKey,
    pub url: String,
    pub version_id: Option<i64>,
    pub state: JobState,
    pub attempts: u32,
    pub enqueued_at: Timestamp,
    pub available_at: Timestamp,
    pub lease: Option<Lease>,
    pub completed_at: Option<Timestamp>,
    pub http_status: Option<u16>,
    pub last_error: Option<String>,
}

const JOB_COLUMNS: &str = "id, blob_key, url, version_id, state, attempts, enqueued_at, available_at, \
     lease_worker, lease_expires_at, completed_at, http_status, last_error";

fn ts(s: String) -> rusqlite::Result<Timestamp> {
    parse_ts(&s).ok_or_else(|| rusqlite::Error::InvalidColumnName(format!("bad timestamp {s:?}")))
}

fn job_from_row(r: &Row<'_>) -> rusqlite::Result<DownloadJob> {
    let state: String = r.get(4)?;
    let lease = match (r.get::<_, Option<String>>(8)?, r.get::<_, Option<String>>(9)?) {
        (Some(worker_id), Some(exp)) => Some(Lease { worker_id, expires_at: ts(exp)? }),
        _ => None,
    };
    Ok(DownloadJob {
        job_id: r.get(0)?,
        blob_key: BlobKey::new(r.get::<_, String>(1)?),
        url: r.get(2)?,
        version_id: r.get(3)?,
        state: state.parse().map_err(rusqlite::Error::InvalidColumnName)?,
        attempts: r.get(5)?,
        enqueued_at: ts(r.get(6)?)?,
        available_at: ts(r.get(7)?)?,
        lease,
        completed_at: r.get::<_, Option<String>>(10)?.map(ts).transpose()?,
        http_status: r.get(11)?,
        last_error: r.get(12)?,
    })
}

/// Adds a job unless one already exists for `key`. Returns the job id and
/// whether it was created.
pub fn enqueue(conn: &Connection, key: &BlobKey, url: &str, version_id: Option<i64>, now: &Timestamp) -> Result<(i64, bool)> {
    let now = format_ts(now);
    let n = conn.execute(
        "INSERT INTO download_jobs (blob_key, url, version_id, state, attempts, enqueued_at, available_at)
         VALUES (?1, ?2, ?3, 'queued', 0, ?4, ?4)
         ON CONFLICT(blob_key) DO NOTHING",
        params![key.as_str(), url, version_id, now],
    )?;
    let id = conn.query_row("SELECT id FROM download_jobs WHERE blob_key = ?1", [key.as_str()], |r| r.get(0))?;
    Ok((id, n == 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueConfig {
    pub lease: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            lease: Duration::from_secs(5 * 60),
            max_attempts: 8,
            backoff_base: Duration::from_secs(2),
            backoff_cap: Duration::from_secs(3600),
        }
    }
}

impl QueueConfig {
    /// Delay before retry number `attempts` (1-based): base * 2^(attempts-1),
    /// capped.
    pub fn backoff(&self, attempts: u32) -> Duration {
        let exp = attempts.saturating_sub(1).min(32);
        self.backoff_base.saturating_mul(1u32 << exp.min(31)).min(self.backoff_cap)
    }
}

/// How one execution ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done { location: BlobLocation, http_status: u16 },
    /// Upstream says the tarball is gone (404/410).
    Missing { http_status: u16 },
    /// Worth retrying: 429, 5xx, transport or storage hiccups.
    Transient { error: String, http_status: Option<u16> },
    /// Not worth retrying.
    Fatal { error: String, http_status: Option<u16> },
}

/// Durable work queue over the `download_jobs` table.
#[derive(Clone)]
pub struct Queue {
    store: Arc<Store>,
    clock: SharedClock,
    config: QueueConfig,
}

impl Queue {
    pub fn new(store: Arc<Store>, clock: SharedClock, config: QueueConfig) -> Self {
        Queue { store, clock, config }
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn enqueue(&self, key: &BlobKey, url: &str) -> Result<(i64, bool)> {
        let now = self.clock.now();
        self.store.with_tx(|tx| enqueue(tx.conn(), key, url, None, &now))
    }

    /// Leases up to `n` of the oldest claimable jobs: queued jobs whose
    /// backoff has elapsed, and leased jobs whose lease expired.
    pub fn claim(&self, worker_id: &str, n: usize) -> Result<Vec<DownloadJob>> {
        let now = self.clock.now();
        let now_s = format_ts(&now);
        let expires = format_ts(&(now + to_delta(self.config.lease)));
        self.store.with_tx(|tx| {
            let conn = tx.conn();
            let ids: Vec<i64> = {
                let mut stmt = conn.prepare_cached(
                    "SELECT id FROM download_jobs
                     WHERE (state = 'queued' AND available_at <= ?1)
                        OR (state = 'leased' AND lease_expires_at <= ?1)
                     ORDER BY enqueued_at, id LIMIT ?2",
                )?;
                let rows = stmt.query_map(params![now_s, n as i64], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            let mut jobs = Vec::with_capacity(ids.len());
            for id in ids {
                conn.execute(
                    "UPDATE download_jobs SET state = 'leased', attempts = attempts + 1,
                        lease_worker = ?2, lease_expires_at = ?3
                     WHERE id = ?1",
                    params![id, worker_id, expires],
                )?;
                jobs.push(get_job(conn, id)?.ok_or_else(|| StoreError::Corrupt(format!("job {id} vanished")))?);
            }
            Ok(jobs)
        })
    }

    /// Extends a live lease. False when the lease is no longer ours.
    pub fn renew(&self, job_id: i64, worker_id: &str) -> Result<bool> {
        let expires = format_ts(&(self.clock.now() + to_delta(self.config.lease)));
        self.store.with_tx(|tx| {
            let n = tx.conn().execute(
                "UPDATE download_jobs SET lease_expires_at = ?3
                 WHERE id = ?1 AND state = 'leased' AND lease_worker = ?2",
                params![job_id, worker_id, expires],
            )?;
            Ok(n == 1)
        })
    }

    /// Records the outcome of an execution. Ignored (returns `None`) when
    /// the job is no longer leased to `worker_id`; otherwise returns the new
    /// state.
    pub fn finish(&self, job: &DownloadJob, worker_id: &str, outcome: &Outcome) -> Result<Option<JobState>> {
        let now = self.clock.now();
        let now_s = format_ts(&now);
        self.store.with_tx(|tx| {
            let conn = tx.conn();
            let current = get_job(conn, job.job_id)?;
            let Some(current) = current else { return Ok(None) };
            if current.state != JobState::Leased || current.lease.as_ref().map(|l| l.worker_id.as_str()) != Some(worker_id) {
                return Ok(None);
            }
            let state = match outcome {
                Outcome::Done { location, http_status } => {
                    conn.execute(
                        "INSERT INTO downloaded_tarballs (blob_key, num_bytes, checksum, stored_at)
                         VALUES (?1, ?2, ?3, ?4) ON CONFLICT(blob_key) DO NOTHING",
                        params![job.blob_key.as_str(), location.num_bytes as i64, location.checksum, now_s],
                    )?;
                    terminal(conn, job.job_id, JobState::Done, &now_s, Some(*http_status), None)?;
                    JobState::Done
                }
                Outcome::Missing { http_status } => {
                    terminal(conn, job.job_id, JobState::Missing, &now_s, Some(*http_status), None)?;
                    JobState::Missing
                }
                Outcome::Fatal { error, http_status } => {
                    terminal(conn, job.job_id, JobState::Failed, &now_s, *http_status, Some(error))?;
                    JobState::Failed
                }
                Outcome::Transient { error, http_status } => {
                    if current.attempts >= self.config.max_attempts {
                        terminal(conn, job.job_id, JobState::Failed, &now_s, *http_status, Some(error))?;
                        JobState::Failed
                    } else {
                        let available = format_ts(&(now + to_delta(self.config.backoff(current.attempts))));
                        conn.execute(
                            "UPDATE download_jobs SET state = 'queued', available_at = ?2, lease_worker = NULL,
                                lease_expires_at = NULL, http_status = ?3, last_error = ?4
                             WHERE id = ?1",
                            params![job.job_id, available, http_status, error],
                        )?;
                        JobState::Queued
                    }
                }
            };
            Ok(Some(state))
        })
    }

    pub fn job(&self, job_id: i64) -> Result<Option<DownloadJob>> {
        self.store.with_conn(|c| get_job(c, job_id))
    }

    pub fn job_by_key(&self, key: &BlobKey) -> Result<Option<DownloadJob>> {
        self.store.with_conn(|c| {
            c.query_row(
                &format!("SELECT {JOB_COLUMNS} FROM download_jobs WHERE blob_key = ?1"),
                [key.as_str()],
                job_from_row,
            )
            .optional()
        })
    }

    pub fn jobs(&self) -> Result<Vec<DownloadJob>> {
        self.store.with_conn(|c| {
            let mut stmt = c.prepare(&format!("SELECT {JOB_COLUMNS} FROM download_jobs ORDER BY id"))?;
            let rows = stmt.query_map([], job_from_row)?;
            rows.collect()
        })
    }

    pub fn count(&self, state: JobState) -> Result<i64> {
        self.store.with_conn(|c| {
            c.query_row("SELECT COUNT(*) FROM download_jobs WHERE state = ?1", [state.as_str()], |r| r.get(0))
        })
    }

    /// Earliest future time at which some non-terminal job becomes
    /// claimable, if any.
    pub fn next_ready_at(&self) -> Result<Option<Timestamp>> {
        let raw: Option<String> = self.store.with_conn(|c| {
            c.query_row(
                "SELECT MIN(t) FROM (
                    SELECT available_at AS t FROM download_jobs WHERE state = 'queued'
                    UNION ALL
                    SELECT lease_expires_at FROM download_jobs WHERE state = 'leased')",
                [],
                |r| r.get(0),
            )
        })?;
        Ok(raw.and_then(|s| parse_ts(&s)))
    }
}

fn terminal(
    conn: &Connection,
    id: i64,
    state: JobState,
    now: &str,
    http_status: Option<u16>,
    error: Option<&str>,
) -> rusqlite::Result<usize> {
    conn.execute(
        "UPDATE download_jobs SET state = ?2, completed_at = ?3, http_status = ?4, last_error = ?5,
            lease_worker = NULL, lease_expires_at = NULL
         WHERE id = ?1 AND state NOT IN ('done', 'missing', 'failed')",
        params![id, state.as_str(), now, http_status, error],
    )
}

fn get_job(conn: &Connection, id: i64) -> rusqlite::Result<Option<DownloadJob>> {
    conn.query_row(&format!("SELECT {JOB_COLUMNS} FROM download_jobs WHERE id = ?1"), [id], job_from_row)
        .optional()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SimClock};

    fn setup() -> (Arc<SimClock>, Queue) {
        let clock = SimClock::shared(parse_ts("2024-03-01T00:00:00Z").unwrap());
        let store = Arc::new(Store::open_in_memory().unwrap());
        (clock.clone(), Queue::new(store, clock, QueueConfig::default()))
    }

    fn key(i: u32) -> BlobKey {
        BlobKey::new(format!("p@1.0.{i}#00"))
    }

    #[test]
    fn enqueue_is_idempotent() {
        let (_c, q) = setup();
        let (a, created) = q.enqueue(&key(1), "http://x/1").unwrap();
        assert!(created);
        let (b, created) = q.enqueue(&key(1), "http://x/1").unwrap();
        assert_eq!((a, created), (b, false));
        assert_eq!(q.jobs().unwrap().len(), 1);
    }

    #[test]
    fn claims_are_disjoint() {
        let (_c, q) = setup();
        for i in 0..3 {
            q.enqueue(&key(i), "http://x").unwrap();
        }
        let a = q.claim("w1", 2).unwrap();
        let b = q.claim("w2", 2).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert!(a.iter().all(|j| j.job_id != b[0].job_id));
        assert!(q.claim("w3", 2).unwrap().is_empty());
    }

    #[test]
    fn expired_lease_is_reclaimable() {
        let (clock, q) = setup();
        q.enqueue(&key(1), "http://x").unwrap();
        let first = q.claim("w1", 1).unwrap();
        clock.advance(Duration::from_secs(4 * 60));
        assert!(q.claim("w2", 1).unwrap().is_empty());
        clock.advance(Duration::from_secs(61));
        let second = q.claim("w2", 1).unwrap();
        assert_eq!(second[0].job_id, first[0].job_id);
        assert_eq!(second[0].attempts, 2);
        // The first worker's late result is ignored.
        assert_eq!(q.finish(&first[0], "w1", &Outcome::Missing { http_status: 404 }).unwrap(), None);
    }

    #[test]
    fn transient_failures_back_off_then_fail() {
        let (clock, q) = setup();
        q.enqueue(&key(1), "http://x").unwrap();
        let mut waits = Vec::new();
        loop {
            let jobs = q.claim("w", 1).unwrap();
            let job = &jobs[0];
            let err = Outcome::Transient { error: "503".into(), http_status: Some(503) };
            match q.finish(job, "w", &err).unwrap().unwrap() {
                JobState::Queued => {
                    let wait = q.next_ready_at().unwrap().unwrap() - clock.now();
                    waits.push(wait.num_seconds());
                    clock.advance(wait.to_std().unwrap());
                }
                JobState::Failed => break,
                other => panic!("unexpected {other}"),
            }
        }
        assert_eq!(waits, vec![2, 4, 8, 16, 32, 64, 128]);
        let job = q.job_by_key(&key(1)).unwrap().unwrap();
        assert_eq!((job.state, job.attempts), (JobState::Failed, 8));
    }

    #[test]
    fn backoff_is_capped() {
        let c = QueueConfig::default();
        assert_eq!(c.backoff(1), Duration::from_secs(2));
        assert_eq!(c.backoff(12), Duration::from_secs(3600));
        assert_eq!(c.backoff(100), Duration::from_secs(3600));
    }

    #[test]
    fn terminal_states_do_not_revert() {
        let (_c, q) = setup();
        q.enqueue(&key(1), "http://x").unwrap();
        let job = q.claim("w", 1).unwrap().remove(0);
        assert_eq!(q.finish(&job, "w", &Outcome::Missing { http_status: 404 }).unwrap(), Some(JobState::Missing));
        assert!(q.claim("w", 1).unwrap().is_empty());
        assert_eq!(q.enqueue(&key(1), "http://x").unwrap().1, false);
        assert_eq!(q.job_by_key(&key(1)).unwrap().unwrap().state, JobState::Missing);
    }
}
