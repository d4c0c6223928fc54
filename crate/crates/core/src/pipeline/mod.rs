//! Tarball download pipeline: a durable job queue in the metadata store,
//! leased to workers that fetch over HTTP and stream into the blob store.

mod fetch;
pub mod queue;

use std::io::Read;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use tracing::{debug, info, warn};

pub use fetch::{Download, FetchResponse, Fetcher, HttpFetcher, StaticFetcher};
pub use queue::{enqueue, DownloadJob, JobState, Lease, Outcome, Queue, QueueConfig};

use crate::blob::{BlobError, BlobWorker, ManagerApi};
use crate::clock::parse_ts;
use crate::store::{Store, StoreError};

/// One download worker. Any number may share a queue and a blob manager.
pub struct Worker {
    id: String,
    queue: Queue,
    fetcher: Arc<dyn Fetcher>,
    blobs: BlobWorker,
    batch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DrainReport {
    pub executed: usize,
    pub done: usize,
    pub missing: usize,
    pub failed: usize,
    pub retried: usize,
    /// Results discarded because the lease had moved on.
    pub stale: usize,
}

impl DrainReport {
    fn record(&mut self, state: Option<JobState>) {
        self.executed += 1;
        match state {
            Some(JobState::Done) => self.done += 1,
            Some(JobState::Missing) => self.missing += 1,
            Some(JobState::Failed) => self.failed += 1,
            Some(JobState::Queued) => self.retried += 1,
            Some(JobState::Leased) | None => self.stale += 1,
        }
    }

    pub fn add(&mut self, o: &DrainReport) {
        self.executed += o.executed;
        self.done += o.done;
        self.missing += o.missing;
        self.failed += o.failed;
        self.retried += o.retried;
        self.stale += o.stale;
    }
}

impl Worker {
    pub fn new(id: impl Into<String>, queue: Queue, fetcher: Arc<dyn Fetcher>, blobs: BlobWorker) -> Self {
        Worker { id: id.into(), queue, fetcher, blobs, batch: 1 }
    }

    /// Jobs claimed per round trip to the queue.
    pub fn with_batch(mut self, n: usize) -> Self {
        self.batch = n.max(1);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Downloads one job's tarball into the blob store.
    pub fn execute(&self, job: &DownloadJob) -> Outcome {
        // A previous holder of this job may have committed before dying.
        if let Ok(location) = self.blobs.manager().lookup(&job.blob_key) {
            return Outcome::Done { location, http_status: 200 };
        }
        let download = match self.fetcher.fetch(&job.url) {
            Err(error) => return Outcome::Transient { error, http_status: None },
            Ok(FetchResponse::Status(s @ (404 | 410))) => return Outcome::Missing { http_status: s },
            Ok(FetchResponse::Status(s)) if s == 408 || s == 429 || s >= 500 => {
                return Outcome::Transient { error: format!("HTTP {s}"), http_status: Some(s) }
            }
            Ok(FetchResponse::Status(s)) => return Outcome::Fatal { error: format!("HTTP {s}"), http_status: Some(s) },
            Ok(FetchResponse::Ok(d)) => d,
        };
        let stored = match download.size {
            Some(size) => self.blobs.put_reader(&job.blob_key, size, download.body),
            None => {
                let mut bytes = Vec::new();
                let mut body = download.body;
                match body.read_to_end(&mut bytes) {
                    Ok(_) => self.blobs.put(&job.blob_key, &bytes),
                    Err(e) => return Outcome::Transient { error: e.to_string(), http_status: Some(200) },
                }
            }
        };
        match stored {
            Ok(location) => Outcome::Done { location, http_status: 200 },
            Err(BlobError::AlreadyStored(_)) => match self.blobs.manager().lookup(&job.blob_key) {
                Ok(location) => Outcome::Done { location, http_status: 200 },
                Err(e) => Outcome::Transient { error: e.to_string(), http_status: Some(200) },
            },
            Err(e @ BlobError::ZeroLength) => Outcome::Fatal { error: e.to_string(), http_status: Some(200) },
            Err(e) => Outcome::Transient { error: e.to_string(), http_status: Some(200) },
        }
    }

    /// Claims one batch and executes it. Returns how many jobs ran.
    pub fn step(&self, report: &mut DrainReport) -> Result<usize, StoreError> {
        let jobs = self.queue.claim(&self.id, self.batch)?;
        for job in &jobs {
            let outcome = self.execute(job);
            let state = self.queue.finish(job, &self.id, &outcome)?;
            match &outcome {
                Outcome::Done { .. } | Outcome::Missing { .. } => {
                    debug!(job = job.job_id, key = %job.blob_key, worker = %self.id, ?state, "job finished")
                }
                Outcome::Transient { error, .. } | Outcome::Fatal { error, .. } => {
                    warn!(job = job.job_id, key = %job.blob_key, worker = %self.id, attempts = job.attempts, %error, ?state, "job attempt failed")
                }
            }
            report.record(state);
        }
        Ok(jobs.len())
    }

    /// Runs until nothing is claimable right now.
    pub fn drain(&self) -> Result<DrainReport, StoreError> {
        let mut report = DrainReport::default();
        while self.step(&mut report)? > 0 {}
        Ok(report)
    }

    /// Runs until every job is terminal, sleeping (on the queue's clock)
    /// through backoff delays and foreign leases.
    pub fn drain_all(&self) -> Result<DrainReport, StoreError> {
        let mut report = DrainReport::default();
        loop {
            if self.step(&mut report)? > 0 {
                continue;
            }
            let clock = self.queue.clock();
            match self.queue.next_ready_at()? {
                Some(t) => {
                    let wait = (t - clock.now()).to_std().unwrap_or(Duration::ZERO);
                    clock.sleep(wait.max(Duration::from_millis(1)));
                }
                None => return Ok(report),
            }
        }
    }

    /// Works until `stop` is set, idling `idle` when the queue is empty.
    pub fn run(&self, stop: &AtomicBool, idle: Duration) -> Result<DrainReport, StoreError> {
        let mut report = DrainReport::default();
        while !stop.load(Ordering::SeqCst) {
            match self.step(&mut report) {
                Ok(0) => self.queue.clock().sleep(idle),
                Ok(_) => {}
                Err(e) if e.is_transient() => {
                    warn!(worker = %self.id, error = %e, "queue unavailable");
                    self.queue.clock().sleep(idle);
                }
                Err(e) => return Err(e),
            }
        }
        info!(worker = %self.id, executed = report.executed, "worker stopped");
        Ok(report)
    }
}

/// Starts `count` workers on their own threads and waits for all of them to
/// stop (when `stop` is set).
pub fn run_pool(
    count: usize,
    queue: Queue,
    fetcher: Arc<dyn Fetcher>,
    manager: Arc<dyn ManagerApi>,
    blob_root: std::path::PathBuf,
    stop: Arc<AtomicBool>,
    idle: Duration,
) -> Result<DrainReport, StoreError> {
    let prefix = format!("{}-{}", hostname(), std::process::id());
    let handles: Vec<_> = (0..count)
        .map(|i| {
            let worker = Worker::new(
                format!("{prefix}-{i}"),
                queue.clone(),
                fetcher.clone(),
                BlobWorker::new(manager.clone(), blob_root.clone()),
            );
            let stop = stop.clone();
            std::thread::spawn(move || worker.run(&stop, idle))
        })
        .collect();
    let mut total = DrainReport::default();
    for h in handles {
        let r = h.join().map_err(|_| StoreError::Query("worker thread panicked".into()))??;
        total.add(&r);
    }
    Ok(total)
}

fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| "worker".into())
}

/// Exact summary of `completed_at - enqueued_at` over done jobs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub completed: usize,
    pub p50_secs: f64,
    pub p99_secs: f64,
    pub max_secs: f64,
    pub sla_secs: f64,
    pub within_sla: usize,
    pub fraction_within: f64,
}

/// Nearest-rank percentile over sorted values.
fn nearest_rank(sorted: &[i64], p: f64) -> i64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Summarizes latencies given in milliseconds. `None` when empty.
pub fn summarize_latencies(latencies_ms: &[i64], sla: Duration) -> Option<LatencyReport> {
    if latencies_ms.is_empty() {
        return None;
    }
    let mut sorted = latencies_ms.to_vec();
    sorted.sort_unstable();
    let sla_ms = sla.as_millis() as i64;
    let within = sorted.partition_point(|&l| l <= sla_ms);
    Some(LatencyReport {
        completed: sorted.len(),
        p50_secs: nearest_rank(&sorted, 50.0) as f64 / 1000.0,
        p99_secs: nearest_rank(&sorted, 99.0) as f64 / 1000.0,
        max_secs: *sorted.last().unwrap() as f64 / 1000.0,
        sla_secs: sla.as_secs_f64(),
        within_sla: within,
        fraction_within: within as f64 / sorted.len() as f64,
    })
}

/// Per-job latency in milliseconds for every done job, by job id.
pub fn job_latencies(store: &Store) -> Result<Vec<(i64, i64)>, StoreError> {
    let rows: Vec<(i64, String, String)> = store.with_conn(|c| {
        let mut stmt = c.prepare(
            "SELECT id, enqueued_at, completed_at FROM download_jobs WHERE state = 'done' ORDER BY id",
        )?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?;
        rows.collect()
    })?;
    rows.into_iter()
        .map(|(id, enq, done)| match (parse_ts(&enq), parse_ts(&done)) {
            (Some(a), Some(b)) => Ok((id, (b - a).num_milliseconds())),
            _ => Err(StoreError::Corrupt(format!("bad timestamps on job {id}"))),
        })
        .collect()
}

pub fn latency_report(store: &Store, sla: Duration) -> Result<Option<LatencyReport>, StoreError> {
    let latencies: Vec<i64> = job_latencies(store)?.into_iter().map(|(_, l)| l).collect();
    Ok(summarize_latencies(&latencies, sla))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blob::{BlobKey, BlobManager, ManagerConfig};
    use crate::clock::SimClock;

    #[test]
    fn percentiles() {
        let r = summarize_latencies(&[10_000, 20_000, 30_000], Duration::from_secs(25)).unwrap();
        assert_eq!(r.p50_secs, 20.0);
        assert_eq!(r.p99_secs, 30.0);
        assert_eq!(r.fraction_within, 2.0 / 3.0);
        let all = summarize_latencies(&[1, 2, 3], Duration::from_secs(1)).unwrap();
        assert_eq!(all.fraction_within, 1.0);
        assert!(summarize_latencies(&[], Duration::from_secs(1)).is_none());
    }

    struct Rig {
        _dir: tempfile::TempDir,
        clock: Arc<SimClock>,
        queue: Queue,
        fetcher: Arc<StaticFetcher>,
        worker: Worker,
    }

    fn rig() -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let clock = SimClock::shared(parse_ts("2024-03-01T00:00:00Z").unwrap());
        let store = Arc::new(Store::open_in_memory().unwrap());
        let queue = Queue::new(store, clock.clone(), QueueConfig::default());
        let manager = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock.clone()).unwrap());
        let fetcher = Arc::new(StaticFetcher::new());
        let worker = Worker::new("w", queue.clone(), fetcher.clone(), BlobWorker::new(manager, dir.path()));
        Rig { _dir: dir, clock, queue, fetcher, worker }
    }

    #[test]
    fn ok_missing_and_retried_jobs() {
        let r = rig();
        r.fetcher.insert("http://t/a.tgz", b"aaa".to_vec());
        r.fetcher.insert("http://t/c.tgz", b"ccc".to_vec());
        r.fetcher.fail_first("http://t/c.tgz", &[503, 503]);
        for (k, url) in [("a", "http://t/a.tgz"), ("b", "http://t/b.tgz"), ("c", "http://t/c.tgz")] {
            r.queue.enqueue(&BlobKey::new(k), url).unwrap();
        }
        let report = r.worker.drain_all().unwrap();
        assert_eq!((report.done, report.missing, report.retried), (2, 1, 2));
        let c = r.queue.job_by_key(&BlobKey::new("c")).unwrap().unwrap();
        assert_eq!((c.state, c.attempts), (JobState::Done, 3));
        let b = r.queue.job_by_key(&BlobKey::new("b")).unwrap().unwrap();
        assert_eq!(b.state, JobState::Missing);
        assert_eq!(r.worker.blobs.get(&BlobKey::new("a")).unwrap(), b"aaa");
        assert!(r.worker.blobs.get(&BlobKey::new("b")).is_err());
    }

    #[test]
    fn client_errors_are_fatal() {
        let r = rig();
        r.fetcher.insert("http://t/x.tgz", b"x".to_vec());
        r.fetcher.fail_first("http://t/x.tgz", &[403]);
        r.queue.enqueue(&BlobKey::new("x"), "http://t/x.tgz").unwrap();
        let report = r.worker.drain_all().unwrap();
        assert_eq!(report.failed, 1);
    }

    #[test]
    fn latency_from_enqueue() {
        let r = rig();
        r.fetcher.insert("http://t/a.tgz", b"a".to_vec());
        r.queue.enqueue(&BlobKey::new("a"), "http://t/a.tgz").unwrap();
        r.clock.advance(Duration::from_secs(90));
        r.worker.drain().unwrap();
        let report = latency_report(r.queue.store(), Duration::from_secs(60)).unwrap().unwrap();
        assert_eq!(report.p50_secs, 90.0);
        assert_eq!(report.fraction_within, 0.0);
    }
}
