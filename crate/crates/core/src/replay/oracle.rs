//! Expected end state of a scenario, computed by interpreting the script
//! directly. Nothing here calls into the ingest, download, blob, scraper or
//! analysis code: the download queue, retry backoff, week arithmetic and
//! the impact query are re-derived from their documented behaviour.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate, TimeDelta};
use serde_json::Value;

use super::scenario::{FaultTarget, Op, Timeline};
use crate::clock::Timestamp;

/// Queue retry policy the pipeline documents: 8 attempts, waits of
/// 2 s doubling per attempt, capped at one hour.
const MAX_ATTEMPTS: u32 = 8;

fn retry_wait_secs(attempt: u32) -> i64 {
    (2i64 << (attempt - 1).min(20)).min(3600)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedVersion {
    pub deleted: bool,
    pub manifest: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectedJob {
    Done { latency_ms: i64 },
    Missing,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expected {
    /// `(package, version)` for every version row.
    pub versions: BTreeMap<(String, String), ExpectedVersion>,
    /// Package name to its final deleted flag.
    pub packages: BTreeMap<String, bool>,
    /// Archived tarball bytes.
    pub blobs: BTreeMap<(String, String), Vec<u8>>,
    pub jobs: BTreeMap<(String, String), ExpectedJob>,
    /// Week the end-of-run sweep covers, and the count each swept package
    /// gets (`None`: recorded as a fetch failure).
    pub sweep_week: Option<NaiveDate>,
    pub metrics: BTreeMap<String, Option<u64>>,
    /// Advisory id to withdrawn flag.
    pub advisories: BTreeMap<String, bool>,
    advisory_docs: BTreeMap<String, Value>,
    pub end_time: Option<Timestamp>,
}

struct PendingJob {
    key: (String, String),
    enqueued: Timestamp,
    available: Timestamp,
    attempts: u32,
    order: usize,
}

struct Faults {
    list: Vec<(Timestamp, super::scenario::Fault, Option<u32>)>,
}

impl Faults {
    fn take(&mut self, now: Timestamp, target: FaultTarget, pkg: &str, ver: &str) -> Option<(Option<i64>, Option<u16>)> {
        let (_, f, remaining) = self
            .list
            .iter_mut()
            .find(|(at, f, rem)| *at <= now && *rem != Some(0) && f.matches(target, Some(pkg), Some(ver)))?;
        if let Some(n) = remaining.as_mut() {
            *n -= 1;
        }
        Some((f.delay_secs.map(|s| s as i64), f.status))
    }
}

pub fn oracle(t: &Timeline) -> Expected {
    let mut exp = Expected::default();
    let mut tarballs: BTreeMap<(String, String), (Vec<u8>, Option<Timestamp>)> = BTreeMap::new();
    let mut faults = Faults { list: Vec::new() };
    for (at, op) in &t.events {
        if let Op::Fault(f) = op {
            faults.list.push((*at, f.clone(), f.times));
        }
    }

    // Script state that does not depend on the clock.
    let mut live: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (at, op) in &t.events {
        match op {
            Op::Publish { package, version, manifest, tarball } => {
                let bytes = match tarball {
                    Some(spec) => spec.bytes().unwrap_or_default(),
                    None => format!("tarball {package}@{version}").into_bytes(),
                };
                tarballs.insert((package.clone(), version.clone()), (bytes, None));
                exp.versions
                    .insert((package.clone(), version.clone()), ExpectedVersion { deleted: false, manifest: manifest.clone() });
                exp.packages.insert(package.clone(), false);
                live.entry(package.clone()).or_default().insert(version.clone());
            }
            Op::DeleteVersion { package, version } => {
                let k = (package.clone(), version.clone());
                exp.versions.get_mut(&k).expect("validated").deleted = true;
                tarballs.get_mut(&k).expect("validated").1 = Some(*at);
                live.get_mut(package).map(|s| s.remove(version));
            }
            Op::DeletePackage { package } => {
                for v in live.remove(package).unwrap_or_default() {
                    let k = (package.clone(), v);
                    exp.versions.get_mut(&k).expect("validated").deleted = true;
                    tarballs.get_mut(&k).expect("validated").1 = Some(*at);
                }
                exp.packages.insert(package.clone(), true);
            }
            Op::Advisory { doc } => {
                let id = doc["id"].as_str().unwrap_or_default().to_string();
                exp.advisories.insert(id.clone(), doc.get("withdrawn").is_some_and(|w| !w.is_null()));
                exp.advisory_docs.insert(id, doc.clone());
            }
            Op::WithdrawAdvisory { id } => {
                exp.advisories.insert(id.clone(), true);
            }
            _ => {}
        }
    }

    // One worker, one job at a time, claimed oldest-enqueued first.
    let publishes: Vec<(Timestamp, (String, String))> = t
        .events
        .iter()
        .filter_map(|(at, op)| match op {
            Op::Publish { package, version, .. } => Some((*at, (package.clone(), version.clone()))),
            _ => None,
        })
        .collect();
    let mut next_publish = 0;
    let mut now = t.start;
    let mut pending: Vec<PendingJob> = Vec::new();
    let mut times: Vec<Timestamp> = t.events.iter().map(|(at, _)| *at).collect();
    times.dedup();
    for group in times {
        now = now.max(group);
        while next_publish < publishes.len() && publishes[next_publish].0 <= now {
            pending.push(PendingJob {
                key: publishes[next_publish].1.clone(),
                enqueued: now,
                available: now,
                attempts: 0,
                order: next_publish,
            });
            next_publish += 1;
        }
        while !pending.is_empty() {
            let ready = pending
                .iter()
                .enumerate()
                .filter(|(_, j)| j.available <= now)
                .min_by_key(|(_, j)| (j.enqueued, j.order))
                .map(|(i, _)| i);
            let Some(i) = ready else {
                now = pending.iter().map(|j| j.available).min().expect("non-empty");
                continue;
            };
            let job = &mut pending[i];
            job.attempts += 1;
            let (pkg, ver) = job.key.clone();
            let mut code = 200u16;
            if let Some((delay, status)) = faults.take(now, FaultTarget::Tarball, &pkg, &ver) {
                if let Some(d) = delay {
                    now += TimeDelta::seconds(d);
                }
                if let Some(s) = status {
                    code = s;
                }
            }
            if code == 200 {
                let (_, gone) = &tarballs[&job.key];
                if gone.is_some_and(|g| g <= now) {
                    code = 404;
                }
            }
            let outcome = match code {
                200 => Some(ExpectedJob::Done { latency_ms: (now - job.enqueued).num_milliseconds() }),
                404 | 410 => Some(ExpectedJob::Missing),
                408 | 429 | 500..=599 => {
                    if job.attempts >= MAX_ATTEMPTS {
                        Some(ExpectedJob::Failed)
                    } else {
                        job.available = now + TimeDelta::seconds(retry_wait_secs(job.attempts));
                        None
                    }
                }
                _ => Some(ExpectedJob::Failed),
            };
            if let Some(o) = outcome {
                let job = pending.remove(i);
                if let ExpectedJob::Done { .. } = o {
                    exp.blobs.insert(job.key.clone(), tarballs[&job.key].0.clone());
                }
                exp.jobs.insert(job.key, o);
            }
        }
    }
    exp.end_time = Some(now);

    // End-of-run sweep over live packages, for the last full Monday week.
    let has_metrics = t.metrics_budget.is_some() || t.events.iter().any(|(_, op)| matches!(op, Op::Metrics { .. }));
    if has_metrics {
        let today = now.date_naive();
        let this_monday = today - TimeDelta::days(today.weekday().num_days_from_monday() as i64);
        let week = this_monday - TimeDelta::days(7);
        exp.sweep_week = Some(week);
        for (name, deleted) in &exp.packages {
            if *deleted {
                continue;
            }
            let count = t.events.iter().rev().find_map(|(at, op)| match op {
                Op::Metrics { week_start, counts } if *at <= now && week_start.is_none_or(|w| w == week) => {
                    counts.get(name).copied()
                }
                _ => None,
            });
            exp.metrics.insert(name.clone(), count);
        }
    }
    exp
}

impl Expected {
    pub fn latencies_ms(&self) -> Vec<i64> {
        self.jobs
            .values()
            .filter_map(|j| match j {
                ExpectedJob::Done { latency_ms } => Some(*latency_ms),
                _ => None,
            })
            .collect()
    }

    /// Share of completed downloads no slower than `sla_secs`.
    pub fn fraction_within(&self, sla_secs: f64) -> Option<f64> {
        let lat = self.latencies_ms();
        if lat.is_empty() {
            return None;
        }
        let within = lat.iter().filter(|ms| (**ms as f64) <= sla_secs * 1000.0).count();
        Some(within as f64 / lat.len() as f64)
    }

    /// Packages named by each non-withdrawn advisory.
    fn advised_packages(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (id, doc) in &self.advisory_docs {
            if self.advisories[id] {
                continue;
            }
            for a in doc.get("affected").and_then(Value::as_array).into_iter().flatten() {
                if let Some(n) = a.pointer("/package/name").and_then(Value::as_str) {
                    out.insert(n.to_string());
                }
            }
        }
        out
    }

    /// `(client package, client version, vulnerable package)` triples: every
    /// version row with a runtime dependency on a known package that has a
    /// live advisory and (when `min > 0`) a swept count above `min`.
    pub fn impact(&self, min: u64, require_tests: bool) -> BTreeSet<(String, String, String)> {
        let vulnerable: BTreeSet<String> = self
            .advised_packages()
            .into_iter()
            .filter(|p| self.packages.contains_key(p))
            .filter(|p| min == 0 || self.metrics.get(p).copied().flatten().is_some_and(|n| n > min))
            .collect();
        let mut out = BTreeSet::new();
        for ((pkg, ver), v) in &self.versions {
            if require_tests && v.manifest.get("scripts").and_then(|s| s.get("test")).is_none() {
                continue;
            }
            let Some(deps) = v.manifest.get("dependencies").and_then(Value::as_object) else { continue };
            for dep in deps.keys() {
                if vulnerable.contains(dep) {
                    out.insert((pkg.clone(), ver.clone(), dep.clone()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::scenario::Scenario;
    use serde_json::json;

    fn timeline(events: Value) -> Timeline {
        let s: Scenario = serde_json::from_value(json!({"events": events})).unwrap();
        s.validate().unwrap()
    }

    #[test]
    fn publish_then_delete_keeps_blob() {
        let t = timeline(json!([
            {"at": 0, "op": "publish", "package": "a", "version": "1.0.0"},
            {"at": 60, "op": "delete_version", "package": "a", "version": "1.0.0"}
        ]));
        let e = oracle(&t);
        assert!(e.versions[&("a".into(), "1.0.0".into())].deleted);
        assert_eq!(e.blobs.len(), 1);
    }

    #[test]
    fn transient_faults_add_backoff() {
        let t = timeline(json!([
            {"at": 0, "op": "fault", "target": "tarball", "package": "a", "status": 503, "times": 2},
            {"op": "publish", "package": "a", "version": "1.0.0"}
        ]));
        assert_eq!(oracle(&t).latencies_ms(), vec![6000]);
    }

    #[test]
    fn delays_queue_behind_each_other() {
        let t = timeline(json!([
            {"at": 0, "op": "fault", "target": "tarball", "package": "a", "delay_secs": 100},
            {"op": "publish", "package": "a", "version": "1.0.0"},
            {"op": "publish", "package": "b", "version": "1.0.0"}
        ]));
        let e = oracle(&t);
        assert_eq!(e.latencies_ms(), vec![100_000, 100_000]);
    }
}
