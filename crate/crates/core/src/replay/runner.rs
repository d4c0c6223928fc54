use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::mock::MockRegistry;
use super::oracle::{Expected, ExpectedJob};
use super::scenario::{ScenarioError, Timeline};
use crate::analyses::{self, AsOfPolicy, UpdateOptions};
use crate::blob::{BlobError, BlobKey, BlobManager, BlobWorker, ManagerApi, ManagerConfig};
use crate::changes::{HttpChangesFeed, IngestError, IngestReport, Ingestor};
use crate::clock::{Clock, SimClock, Timestamp};
use crate::pipeline::{DrainReport, HttpFetcher, Queue, QueueConfig, Worker};
use crate::scrapers::{
    sync_advisories, AdvisoryError, AdvisorySyncReport, HttpAdvisorySource, HttpMetricsClient, MetricsSweeper,
    SweepConfig, SweepReport,
};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Advisory(#[from] AdvisoryError),
    #[error("mock server: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics budget violated: {0:?}")]
    BudgetViolation(Vec<String>),
}

impl ReplayError {
    pub fn kind(&self) -> &'static str {
        match self {
            ReplayError::Scenario(e) => e.kind(),
            ReplayError::Store(e) => e.kind(),
            ReplayError::Blob(e) => e.kind(),
            ReplayError::Ingest(e) => e.kind(),
            ReplayError::Advisory(e) => e.kind(),
            ReplayError::Io(_) => "io-error",
            ReplayError::BudgetViolation(_) => "budget-violation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    /// Holds `metadata.db` and `blobs/`.
    pub work_dir: PathBuf,
    pub page_size: usize,
    pub segment_size: u64,
    /// Feed polls retried this many times on injected feed faults.
    pub feed_retries: usize,
}

impl RunnerConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        RunnerConfig { work_dir: work_dir.into(), page_size: 100, segment_size: 64 << 20, feed_retries: 20 }
    }

    pub fn store_path(&self) -> PathBuf {
        self.work_dir.join("metadata.db")
    }

    pub fn blob_root(&self) -> PathBuf {
        self.work_dir.join("blobs")
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub ingest: IngestReport,
    pub downloads: DrainReport,
    pub advisories: AdvisorySyncReport,
    pub sweep: Option<SweepReport>,
    pub metrics_requests: usize,
    pub end_time: Option<Timestamp>,
}

pub struct RunOutcome {
    pub store: Arc<Store>,
    pub blobs: BlobWorker,
    pub clock: Arc<SimClock>,
    pub summary: RunSummary,
    pub metrics_requests: Vec<Timestamp>,
}

/// Replays a timeline through the real pipeline: the mock serves the
/// script over HTTP while ingest, one download worker, advisory sync, a
/// metrics sweep and the analyses run against it on a simulated clock.
pub struct ScenarioRunner {
    timeline: Timeline,
    config: RunnerConfig,
}

impl ScenarioRunner {
    pub fn new(timeline: Timeline, config: RunnerConfig) -> Self {
        ScenarioRunner { timeline, config }
    }

    fn ingest(&self, ingestor: &Ingestor, summary: &mut RunSummary) -> Result<(), ReplayError> {
        let mut failures = 0;
        loop {
            match ingestor.drain() {
                Ok(r) => {
                    summary.ingest.events += r.events;
                    summary.ingest.pages += r.pages;
                    summary.ingest.invalid_events += r.invalid_events;
                    summary.ingest.resyncs += r.resyncs;
                    summary.ingest.applied.add(&r.applied);
                    summary.ingest.cursor = r.cursor;
                    return Ok(());
                }
                Err(IngestError::Feed(e)) if failures < self.config.feed_retries => {
                    tracing::debug!(error = %e, "feed poll failed; retrying");
                    failures += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn run(&self) -> Result<RunOutcome, ReplayError> {
        let t = &self.timeline;
        std::fs::create_dir_all(&self.config.work_dir)?;
        let clock = SimClock::shared(t.start);
        let mock = MockRegistry::start(t, clock.clone())?;
        let store = Arc::new(Store::open(self.config.store_path())?);
        let manager_config = ManagerConfig { segment_size: self.config.segment_size, fsync: false, ..Default::default() };
        let manager: Arc<dyn ManagerApi> =
            Arc::new(BlobManager::open(self.config.blob_root(), manager_config, clock.clone())?);
        let blobs = BlobWorker::new(manager, self.config.blob_root()).with_fsync(false);
        let feed = Arc::new(HttpChangesFeed::new(format!("replay:{}", t.name), mock.feed_url()));
        let ingestor = Ingestor::new(store.clone(), feed, clock.clone()).with_page_size(self.config.page_size);
        let queue = Queue::new(store.clone(), clock.clone(), QueueConfig::default());
        let worker = Worker::new("replay-0", queue, Arc::new(HttpFetcher::default()), blobs.clone());

        let mut summary = RunSummary::default();
        for at in t.times() {
            if at > clock.now() {
                clock.advance_to(at);
            }
            self.ingest(&ingestor, &mut summary)?;
            summary.downloads.add(&worker.drain_all()?);
        }

        summary.advisories = sync_advisories(&store, &HttpAdvisorySource::new(mock.base_url()))?;
        let has_metrics = t.metrics_budget.is_some()
            || t.events.iter().any(|(_, op)| matches!(op, super::scenario::Op::Metrics { .. }));
        if has_metrics {
            let client = HttpMetricsClient::new(mock.base_url());
            let config = SweepConfig { budget: t.metrics_budget.clone().unwrap_or_default(), ..Default::default() };
            let mut sweeper = MetricsSweeper::new(&store, &client, clock.clone(), config);
            summary.sweep = Some(sweeper.run(&|| false)?);
        }
        let violations = mock.budget_violations();
        if !violations.is_empty() {
            return Err(ReplayError::BudgetViolation(violations));
        }

        analyses::materialize_direct_runtime_deps(&store)?;
        analyses::resolve_edges(&store, AsOfPolicy::default())?;
        analyses::compute_updates(&store, UpdateOptions::default())?;
        analyses::vulnerable_versions(&store)?;

        let metrics_requests = mock.metrics_requests();
        summary.metrics_requests = metrics_requests.len();
        summary.end_time = Some(clock.now());
        Ok(RunOutcome { store, blobs, clock, summary, metrics_requests })
    }
}

fn blob_for(blobs: &BlobWorker, key: Option<String>) -> Option<Vec<u8>> {
    blobs.get(&BlobKey::new(key?)).ok()
}

/// Every difference between the stored state and the oracle's expectation.
/// Empty means the run matched.
pub fn compare(store: &Store, blobs: &BlobWorker, expected: &Expected) -> Result<Vec<String>, StoreError> {
    let mut diffs = Vec::new();
    type Row = (String, String, bool, Option<String>, Option<String>);
    let rows: Vec<Row> = store.with_conn(|c| {
        let mut stmt = c.prepare(
            "SELECT p.name, v.version, v.deleted, j.state, j.blob_key
             FROM versions v JOIN packages p ON p.id = v.package_id
             LEFT JOIN download_jobs j ON j.version_id = v.id
             ORDER BY v.id",
        )?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?)))?;
        rows.collect()
    })?;
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (pkg, ver, deleted, state, key) in rows {
        let k = (pkg.clone(), ver.clone());
        *seen.entry(k.clone()).or_default() += 1;
        let Some(exp) = expected.versions.get(&k) else {
            diffs.push(format!("unexpected version row {pkg}@{ver}"));
            continue;
        };
        if exp.deleted != deleted {
            diffs.push(format!("{pkg}@{ver}: deleted={deleted}, expected {}", exp.deleted));
        }
        let want_state = match expected.jobs.get(&k) {
            Some(ExpectedJob::Done { .. }) => Some("done"),
            Some(ExpectedJob::Missing) => Some("missing"),
            Some(ExpectedJob::Failed) => Some("failed"),
            None => None,
        };
        if state.as_deref() != want_state {
            diffs.push(format!("{pkg}@{ver}: job state {state:?}, expected {want_state:?}"));
        }
        let stored = blob_for(blobs, key);
        let want = expected.blobs.get(&k);
        if stored.as_ref() != want {
            diffs.push(format!(
                "{pkg}@{ver}: blob {} bytes, expected {} bytes",
                stored.map_or(-1, |b| b.len() as i64),
                want.map_or(-1, |b| b.len() as i64)
            ));
        }
    }
    for k in expected.versions.keys() {
        match seen.get(k) {
            None => diffs.push(format!("missing version row {}@{}", k.0, k.1)),
            Some(n) if *n > 1 => diffs.push(format!("{}@{}: {n} rows", k.0, k.1)),
            _ => {}
        }
    }
    for (name, deleted) in &expected.packages {
        match store.package_by_name(name)? {
            None => diffs.push(format!("missing package {name}")),
            Some(p) if p.deleted != *deleted => diffs.push(format!("{name}: deleted={}, expected {deleted}", p.deleted)),
            Some(p) => {
                if let Some(want) = expected.metrics.get(name) {
                    let series = store.metric_series(p.id)?;
                    let got = series.last().filter(|pt| Some(pt.week_start) == expected.sweep_week).map(|pt| pt.counter);
                    if got != *want {
                        diffs.push(format!("{name}: latest metric {got:?}, expected {want:?}"));
                    }
                    if series.len() > 1 {
                        diffs.push(format!("{name}: {} metric points", series.len()));
                    }
                }
            }
        }
    }
    for (id, withdrawn) in &expected.advisories {
        let stored: Vec<_> = store
            .advisories()?
            .into_iter()
            .filter(|a| a.advisory_id == *id || a.advisory_id.starts_with(&format!("{id}/")))
            .collect();
        if stored.is_empty() {
            diffs.push(format!("missing advisory {id}"));
        }
        for a in stored {
            if a.withdrawn != *withdrawn {
                diffs.push(format!("advisory {}: withdrawn={}, expected {withdrawn}", a.advisory_id, a.withdrawn));
            }
        }
    }
    Ok(diffs)
}

/// Loads, validates and runs a scenario file into `work_dir`.
pub fn run_file(path: &Path, work_dir: &Path) -> Result<(Timeline, RunOutcome), ReplayError> {
    let timeline = super::Scenario::load(path)?.validate()?;
    let outcome = ScenarioRunner::new(timeline.clone(), RunnerConfig::new(work_dir)).run()?;
    Ok((timeline, outcome))
}

/// Latency SLA helper: the fraction the oracle predicts for `sla`.
pub fn expected_fraction_within(expected: &Expected, sla: Duration) -> Option<f64> {
    expected.fraction_within(sla.as_secs_f64())
}
