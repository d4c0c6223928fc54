use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use chrono::{Datelike, NaiveDate, TimeDelta};
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde::Serialize;
use rusqlite::OptionalExtension;
use serde_json::Value;

use super::rate::{RateBudget, RateLimiter};
use crate::clock::{format_ts, to_delta, SharedClock, Timestamp};
use crate::store::MetricPoint;
use crate::store::{Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepPlan {
    pub batches: Vec<Vec<String>>,
    pub sweep_started_at: Timestamp,
    pub estimated_completion: Timestamp,
}

impl SweepPlan {
    pub fn package_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Scoped names cannot go through the bulk endpoint, so each gets its own
/// request. Unscoped names are sorted and chunked.
pub fn plan_sweep(packages: &[String], budget: &RateBudget, started_at: Timestamp) -> SweepPlan {
    let mut names: Vec<&String> = packages.iter().collect();
    names.sort();
    names.dedup();
    let (scoped, bulk): (Vec<&String>, Vec<&String>) = names.into_iter().partition(|n| n.contains('/'));
    let mut batches: Vec<Vec<String>> = bulk
        .chunks(budget.batch_size.max(1))
        .map(|c| c.iter().map(|s| s.to_string()).collect())
        .collect();
    batches.extend(scoped.into_iter().map(|n| vec![n.clone()]));
    let rounds = batches.len().div_ceil(budget.requests_per_interval.max(1) as usize) as u32;
    SweepPlan {
        estimated_completion: started_at + to_delta(budget.interval * rounds),
        sweep_started_at: started_at,
        batches,
    }
}

/// Monday-to-Sunday week fully before `now`.
pub fn last_complete_week(now: &Timestamp) -> (NaiveDate, NaiveDate) {
    let today = now.date_naive();
    let monday = today - TimeDelta::days(today.weekday().num_days_from_monday() as i64);
    let start = monday - TimeDelta::days(7);
    (start, start + TimeDelta::days(6))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("rate limited")]
    RateLimited,
    #[error("upstream error: {0}")]
    Upstream(String),
}

/// Downloads per package for one period. A package missing from the map
/// had no data upstream.
pub trait MetricsClient: Send + Sync {
    fn fetch(&self, names: &[String], start: NaiveDate, end: NaiveDate) -> Result<BTreeMap<String, u64>, MetricsError>;
}

const PATH_SEGMENT: &AsciiSet = &CONTROLS.add(b' ').add(b'#').add(b'?').add(b'%').add(b',');

pub struct HttpMetricsClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpMetricsClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        HttpMetricsClient { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }
}

impl MetricsClient for HttpMetricsClient {
    fn fetch(&self, names: &[String], start: NaiveDate, end: NaiveDate) -> Result<BTreeMap<String, u64>, MetricsError> {
        let joined = names
            .iter()
            .map(|n| utf8_percent_encode(n, PATH_SEGMENT).to_string())
            .collect::<Vec<_>>()
            .join(",");
        let url = format!("{}/downloads/point/{start}:{end}/{joined}", self.base_url);
        let mut response = self.agent.get(&url).call().map_err(|e| MetricsError::Upstream(e.to_string()))?;
        match response.status().as_u16() {
            200 => {}
            429 => return Err(MetricsError::RateLimited),
            404 => return Ok(BTreeMap::new()),
            s => return Err(MetricsError::Upstream(format!("HTTP {s}"))),
        }
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| MetricsError::Upstream(e.to_string()))?;
        let value: Value = serde_json::from_str(&body).map_err(|e| MetricsError::Upstream(e.to_string()))?;
        parse_point_response(&value).map_err(MetricsError::Upstream)
    }
}

/// Accepts both the bulk shape `{name: {downloads, ..} | null}` and the
/// single-package shape `{downloads, package, ..}`.
pub fn parse_point_response(value: &Value) -> Result<BTreeMap<String, u64>, String> {
    let obj = value.as_object().ok_or("metrics response is not an object")?;
    let mut out = BTreeMap::new();
    if let (Some(downloads), Some(package)) = (obj.get("downloads"), obj.get("package").and_then(Value::as_str)) {
        let n = downloads.as_u64().ok_or("downloads is not a count")?;
        out.insert(package.to_string(), n);
        return Ok(out);
    }
    for (name, entry) in obj {
        if entry.is_null() {
            continue;
        }
        let n = entry
            .get("downloads")
            .and_then(Value::as_u64)
            .ok_or_else(|| format!("entry for {name} has no download count"))?;
        out.insert(name.clone(), n);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub sweep_id: i64,
    pub week_start: String,
    pub resumed: bool,
    pub packages: usize,
    pub batches: usize,
    pub requests: u64,
    pub rate_limited: u64,
    pub points_appended: usize,
    pub failures: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub budget: RateBudget,
    /// Attempts per batch before its packages are recorded as failures.
    pub max_attempts: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { budget: RateBudget::default(), max_attempts: 5 }
    }
}

pub struct MetricsSweeper<'a> {
    store: &'a Store,
    client: &'a dyn MetricsClient,
    clock: SharedClock,
    config: SweepConfig,
    limiter: RateLimiter,
}

impl<'a> MetricsSweeper<'a> {
    pub fn new(store: &'a Store, client: &'a dyn MetricsClient, clock: SharedClock, config: SweepConfig) -> Self {
        let limiter = RateLimiter::new(config.budget.clone(), clock.clone());
        MetricsSweeper { store, client, clock, config, limiter }
    }

    /// Packages still lacking a point or a recorded failure for the week.
    fn pending_packages(&self, week: &str) -> Result<Vec<String>, StoreError> {
        self.store.with_conn(|c| {
            let mut stmt = c.prepare(
                "SELECT p.name FROM packages p
                 LEFT JOIN download_metrics m ON m.package_id = p.id
                 WHERE p.deleted = 0
                   AND NOT EXISTS (SELECT 1 FROM json_each(COALESCE(m.download_counts, '[]')) j
                                   WHERE j.value ->> 'week_start' >= ?1)
                   AND NOT EXISTS (SELECT 1 FROM metric_fetch_failures f
                                   WHERE f.package_name = p.name AND f.week_start = ?1)
                 ORDER BY p.name",
            )?;
            let names = stmt.query_map([week], |r| r.get(0))?.collect();
            names
        })
    }

    fn open_sweep(&self, week: &str, batches: usize, now: &Timestamp) -> Result<(i64, bool, String), StoreError> {
        self.store.with_tx(|tx| {
            let c = tx.conn();
            let existing: Option<(i64, String)> = c
                .query_row(
                    "SELECT id, started_at FROM metrics_sweeps WHERE week_start = ?1 AND finished_at IS NULL
                     ORDER BY id DESC LIMIT 1",
                    [week],
                    |r| Ok((r.get(0)?, r.get(1)?)),
                )
                .optional()?;
            if let Some((id, started)) = existing {
                c.execute("UPDATE metrics_sweeps SET batches = next_batch + ?2 WHERE id = ?1", rusqlite::params![id, batches as i64])?;
                return Ok((id, true, started));
            }
            let started = format_ts(now);
            c.execute(
                "INSERT INTO metrics_sweeps (week_start, started_at, batches) VALUES (?1, ?2, ?3)",
                rusqlite::params![week, started, batches as i64],
            )?;
            Ok((c.last_insert_rowid(), false, started))
        })
    }

    pub fn plan(&self) -> Result<SweepPlan, StoreError> {
        let now = self.clock.now();
        let (start, _) = last_complete_week(&now);
        Ok(plan_sweep(&self.pending_packages(&start.to_string())?, &self.config.budget, now))
    }

    /// Runs (or resumes) the sweep for the last complete week. `stop` is
    /// checked between batches; an interrupted sweep stays unfinished.
    pub fn run(&mut self, stop: &dyn Fn() -> bool) -> Result<SweepReport, StoreError> {
        let now = self.clock.now();
        let (start, end) = last_complete_week(&now);
        let week = start.to_string();
        let plan = plan_sweep(&self.pending_packages(&week)?, &self.config.budget, now);
        let (sweep_id, resumed, started_at) = self.open_sweep(&week, plan.batches.len(), &now)?;
        let mut report = SweepReport {
            sweep_id,
            week_start: week.clone(),
            resumed,
            packages: plan.package_count(),
            batches: plan.batches.len(),
            started_at,
            ..Default::default()
        };
        tracing::info!(sweep_id, week = %week, batches = report.batches, packages = report.packages, "metrics sweep");

        let mut queue: VecDeque<(Vec<String>, u32)> = plan.batches.into_iter().map(|b| (b, 0)).collect();
        while let Some((batch, attempts)) = queue.pop_front() {
            if stop() {
                return Ok(report);
            }
            self.limiter.acquire();
            report.requests += 1;
            let result = self.client.fetch(&batch, start, end);
            let at = self.clock.now();
            let done = match result {
                Ok(counts) => {
                    let (appended, failed) = self.record_batch(&batch, &counts, &week, &at)?;
                    report.points_appended += appended;
                    report.failures += failed;
                    true
                }
                Err(e) => {
                    if e == MetricsError::RateLimited {
                        report.rate_limited += 1;
                    }
                    tracing::warn!(error = %e, batch = batch.len(), attempts = attempts + 1, "metrics request failed");
                    if attempts + 1 >= self.config.max_attempts {
                        self.store.with_tx(|tx| {
                            for name in &batch {
                                tx.record_metric_failure(name, &week, &e.to_string(), &at)?;
                            }
                            Ok::<_, StoreError>(())
                        })?;
                        report.failures += batch.len();
                        true
                    } else {
                        match e {
                            MetricsError::RateLimited => queue.push_front((batch, attempts + 1)),
                            MetricsError::Upstream(_) => queue.push_back((batch, attempts + 1)),
                        }
                        false
                    }
                }
            };
            self.store.with_conn(|c| {
                c.execute(
                    "UPDATE metrics_sweeps SET requests = requests + 1, next_batch = next_batch + ?2 WHERE id = ?1",
                    rusqlite::params![sweep_id, done as i64],
                )
            })?;
        }
        let finished = format_ts(&self.limiter.next_permit());
        self.store.with_conn(|c| {
            c.execute("UPDATE metrics_sweeps SET finished_at = ?2 WHERE id = ?1", rusqlite::params![sweep_id, finished])
        })?;
        report.finished_at = Some(finished);
        Ok(report)
    }

    fn record_batch(
        &self,
        batch: &[String],
        counts: &BTreeMap<String, u64>,
        week: &str,
        at: &Timestamp,
    ) -> Result<(usize, usize), StoreError> {
        let week_start: NaiveDate = week.parse().expect("week is a formatted date");
        self.store.with_tx(|tx| {
            let (mut appended, mut failed) = (0, 0);
            for name in batch {
                let Some(pkg) = tx.known_package(name)? else { continue };
                match counts.get(name) {
                    Some(n) => {
                        if tx.append_metric_point(pkg.id, MetricPoint { week_start, counter: *n })? {
                            appended += 1;
                        }
                    }
                    None => {
                        tx.record_metric_failure(name, week, "no data", at)?;
                        failed += 1;
                    }
                }
            }
            Ok((appended, failed))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{parse_ts, SimClock};
    use std::sync::Mutex;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("pkg-{i:04}")).collect()
    }

    #[test]
    fn batch_sizes() {
        let t = parse_ts("2024-03-06T00:00:00Z").unwrap();
        let plan = plan_sweep(&names(300), &RateBudget::default(), t);
        assert_eq!(plan.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        assert!(plan_sweep(&[], &RateBudget::default(), t).batches.is_empty());
        let plan = plan_sweep(&names(1000), &RateBudget::default(), t);
        assert_eq!(plan.batches.len(), 8);
        assert_eq!((plan.estimated_completion - t).num_minutes(), 8);
    }

    #[test]
    fn scoped_names_are_singletons() {
        let t = parse_ts("2024-03-06T00:00:00Z").unwrap();
        let mut pkgs = names(3);
        pkgs.push("@a/x".into());
        pkgs.push("@a/y".into());
        let plan = plan_sweep(&pkgs, &RateBudget::default(), t);
        assert_eq!(plan.batches, vec![names(3), vec!["@a/x".to_string()], vec!["@a/y".to_string()]]);
    }

    #[test]
    fn week_boundaries() {
        // 2024-03-06 is a Wednesday.
        let (s, e) = last_complete_week(&parse_ts("2024-03-06T12:00:00Z").unwrap());
        assert_eq!(s.to_string(), "2024-02-26");
        assert_eq!(e.to_string(), "2024-03-03");
        let (s, _) = last_complete_week(&parse_ts("2024-03-04T00:00:00Z").unwrap());
        assert_eq!(s.to_string(), "2024-02-26");
    }

    #[test]
    fn both_response_shapes() {
        let bulk = serde_json::json!({"a": {"downloads": 3, "package": "a"}, "b": null});
        assert_eq!(parse_point_response(&bulk).unwrap(), BTreeMap::from([("a".to_string(), 3)]));
        let single = serde_json::json!({"downloads": 9, "start": "x", "end": "y", "package": "@s/p"});
        assert_eq!(parse_point_response(&single).unwrap(), BTreeMap::from([("@s/p".to_string(), 9)]));
    }

    struct Scripted {
        faults: Mutex<Vec<MetricsError>>,
        calls: Mutex<u32>,
    }

    impl MetricsClient for Scripted {
        fn fetch(&self, names: &[String], _: NaiveDate, _: NaiveDate) -> Result<BTreeMap<String, u64>, MetricsError> {
            *self.calls.lock().unwrap() += 1;
            if let Some(e) = self.faults.lock().unwrap().pop() {
                return Err(e);
            }
            Ok(names.iter().map(|n| (n.clone(), n.len() as u64)).collect())
        }
    }

    #[test]
    fn rate_limited_batch_is_retried_and_sweep_is_idempotent() {
        let store = Store::open_in_memory().unwrap();
        store
            .with_tx(|tx| {
                for n in ["a", "b", "c"] {
                    tx.ensure_package(n)?;
                }
                Ok::<_, StoreError>(())
            })
            .unwrap();
        let clock = SimClock::shared(parse_ts("2024-03-06T00:00:00Z").unwrap());
        let client = Scripted { faults: Mutex::new(vec![MetricsError::RateLimited]), calls: Mutex::new(0) };
        let mut sweeper = MetricsSweeper::new(&store, &client, clock.clone(), SweepConfig::default());
        let report = sweeper.run(&|| false).unwrap();
        assert_eq!(report.points_appended, 3);
        assert_eq!(report.requests, 2);
        assert_eq!(report.rate_limited, 1);
        let again = sweeper.run(&|| false).unwrap();
        assert_eq!(again.packages, 0);
        assert_eq!(again.points_appended, 0);
        let a = store.package_by_name("a").unwrap().unwrap();
        assert_eq!(store.metric_series(a.id).unwrap().len(), 1);
    }
}
