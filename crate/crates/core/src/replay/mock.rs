use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::scenario::{FaultTarget, Op, ScenarioError, Timeline};
use crate::clock::{format_ts, parse_ts, to_delta, SharedClock, Timestamp};
use crate::scrapers::RateBudget;

struct FeedEntry {
    at: Timestamp,
    id: String,
    deleted: bool,
    doc: Option<Value>,
}

struct Tarball {
    bytes: Arc<Vec<u8>>,
    gone_at: Option<Timestamp>,
}

struct ActiveFault {
    at: Timestamp,
    fault: super::scenario::Fault,
    remaining: Option<u32>,
}

struct MetricsOp {
    at: Timestamp,
    week_start: Option<NaiveDate>,
    counts: BTreeMap<String, u64>,
}

struct MockState {
    clock: SharedClock,
    feed: Vec<FeedEntry>,
    tarballs: HashMap<(String, String), Tarball>,
    faults: Vec<ActiveFault>,
    metrics: Vec<MetricsOp>,
    advisory_ops: Vec<(Timestamp, Op)>,
    budget: Option<RateBudget>,
    metrics_log: Vec<Timestamp>,
    violations: Vec<String>,
}

#[derive(Default)]
struct PackageDoc {
    versions: Map<String, Value>,
    time: Map<String, Value>,
    rev: u64,
}

impl PackageDoc {
    fn render(&self, name: &str, latest: Option<&str>) -> Value {
        let mut doc = json!({
            "_id": name,
            "_rev": format!("{}-mock", self.rev),
            "name": name,
            "versions": self.versions,
            "time": self.time,
        });
        if let Some(l) = latest {
            doc["dist-tags"] = json!({ "latest": l });
        }
        doc
    }
}

pub fn tarball_path(package: &str, version: &str) -> String {
    format!("/tarballs/{package}/{version}.tgz")
}

impl MockState {
    fn build(t: &Timeline, base: &str, clock: SharedClock) -> Result<Self, ScenarioError> {
        let mut docs: HashMap<String, PackageDoc> = HashMap::new();
        let mut state = MockState {
            clock,
            feed: Vec::new(),
            tarballs: HashMap::new(),
            faults: Vec::new(),
            metrics: Vec::new(),
            advisory_ops: Vec::new(),
            budget: t.metrics_budget.clone(),
            metrics_log: Vec::new(),
            violations: Vec::new(),
        };
        for (at, op) in &t.events {
            match op {
                Op::Publish { package, version, manifest, tarball } => {
                    let bytes = Timeline::tarball_bytes(package, version, tarball.as_ref())?;
                    let mut m = manifest.clone();
                    m.insert("name".into(), json!(package));
                    m.insert("version".into(), json!(version));
                    m.insert("dist".into(), json!({ "tarball": format!("{base}{}", tarball_path(package, version)) }));
                    let doc = docs.entry(package.clone()).or_default();
                    if doc.time.is_empty() {
                        doc.time.insert("created".into(), json!(format_ts(at)));
                    }
                    doc.versions.insert(version.clone(), Value::Object(m));
                    doc.time.insert(version.clone(), json!(format_ts(at)));
                    doc.time.insert("modified".into(), json!(format_ts(at)));
                    doc.rev += 1;
                    state.tarballs.insert(
                        (package.clone(), version.clone()),
                        Tarball { bytes: Arc::new(bytes), gone_at: None },
                    );
                    let rendered = doc.render(package, Some(version));
                    state.feed.push(FeedEntry { at: *at, id: package.clone(), deleted: false, doc: Some(rendered) });
                }
                Op::DeleteVersion { package, version } => {
                    let doc = docs.get_mut(package).expect("validated");
                    doc.versions.remove(version);
                    doc.time.insert("modified".into(), json!(format_ts(at)));
                    doc.rev += 1;
                    if let Some(tb) = state.tarballs.get_mut(&(package.clone(), version.clone())) {
                        tb.gone_at = Some(*at);
                    }
                    let rendered = doc.render(package, None);
                    state.feed.push(FeedEntry { at: *at, id: package.clone(), deleted: false, doc: Some(rendered) });
                }
                Op::DeletePackage { package } => {
                    let doc = docs.remove(package).expect("validated");
                    for v in doc.versions.keys() {
                        if let Some(tb) = state.tarballs.get_mut(&(package.clone(), v.clone())) {
                            tb.gone_at.get_or_insert(*at);
                        }
                    }
                    state.feed.push(FeedEntry { at: *at, id: package.clone(), deleted: true, doc: None });
                }
                Op::Advisory { .. } | Op::WithdrawAdvisory { .. } => state.advisory_ops.push((*at, op.clone())),
                Op::Metrics { week_start, counts } => {
                    state.metrics.push(MetricsOp { at: *at, week_start: *week_start, counts: counts.clone() })
                }
                Op::Fault(f) => state.faults.push(ActiveFault { at: *at, fault: f.clone(), remaining: f.times }),
            }
        }
        Ok(state)
    }

    /// Consumes one use of the first live fault matching the request.
    fn take_fault(&mut self, target: FaultTarget, package: Option<&str>, version: Option<&str>) -> Option<(Option<Duration>, Option<u16>)> {
        let now = self.clock.now();
        let f = self
            .faults
            .iter_mut()
            .find(|f| f.at <= now && f.remaining != Some(0) && f.fault.matches(target, package, version))?;
        if let Some(n) = f.remaining.as_mut() {
            *n -= 1;
        }
        Some((f.fault.delay(), f.fault.status))
    }

    fn advisories(&self, since: Option<&str>) -> Vec<Value> {
        let now = self.clock.now();
        let mut docs: BTreeMap<String, Value> = BTreeMap::new();
        for (at, op) in self.advisory_ops.iter().filter(|(at, _)| *at <= now) {
            match op {
                Op::Advisory { doc } => {
                    let mut doc = doc.clone();
                    if doc.get("modified").is_none() {
                        doc["modified"] = json!(format_ts(at));
                    }
                    let id = doc["id"].as_str().unwrap_or_default().to_string();
                    docs.insert(id, doc);
                }
                Op::WithdrawAdvisory { id } => {
                    if let Some(doc) = docs.get_mut(id) {
                        doc["withdrawn"] = json!(format_ts(at));
                        doc["modified"] = json!(format_ts(at));
                    }
                }
                _ => {}
            }
        }
        let since = since.and_then(parse_ts);
        docs.into_values()
            .filter(|d| match (since, d.get("modified").and_then(Value::as_str).and_then(parse_ts)) {
                (Some(s), Some(m)) => m > s,
                _ => true,
            })
            .collect()
    }
}

type Shared = Arc<Mutex<MockState>>;

async fn wait(clock: SharedClock, d: Duration) {
    let _ = tokio::task::spawn_blocking(move || clock.sleep(d)).await;
}

fn status(code: u16, body: Value) -> Response {
    (StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), Json(body)).into_response()
}

#[derive(Deserialize)]
struct ChangesQuery {
    since: Option<String>,
    limit: Option<usize>,
}

async fn changes(State(s): State<Shared>, Query(q): Query<ChangesQuery>) -> Response {
    let fault = s.lock().unwrap().take_fault(FaultTarget::Feed, None, None);
    if let Some((delay, code)) = fault {
        if let Some(d) = delay {
            let clock = s.lock().unwrap().clock.clone();
            wait(clock, d).await;
        }
        if let Some(code) = code {
            return status(code, json!({"error": "injected fault"}));
        }
    }
    let st = s.lock().unwrap();
    let since: usize = match q.since.as_deref().unwrap_or("0").parse() {
        Ok(n) => n,
        Err(_) => return status(400, json!({"error": "bad_request", "reason": "malformed since"})),
    };
    let now = st.clock.now();
    let visible = st.feed.iter().take_while(|e| e.at <= now).count();
    let limit = q.limit.unwrap_or(usize::MAX).max(1);
    let results: Vec<Value> = st
        .feed
        .iter()
        .enumerate()
        .take(visible)
        .skip(since)
        .take(limit)
        .map(|(i, e)| {
            let mut row = json!({"seq": i + 1, "id": e.id, "changes": [{"rev": format!("{}-mock", i + 1)}]});
            if e.deleted {
                row["deleted"] = json!(true);
            }
            if let Some(doc) = &e.doc {
                row["doc"] = doc.clone();
            }
            row
        })
        .collect();
    let last_seq = (since + results.len()).max(since);
    status(200, json!({"results": results, "last_seq": last_seq}))
}

async fn tarball(State(s): State<Shared>, Path(path): Path<String>) -> Response {
    let Some((package, file)) = path.rsplit_once('/') else {
        return status(404, json!({"error": "not found"}));
    };
    let Some(version) = file.strip_suffix(".tgz") else {
        return status(404, json!({"error": "not found"}));
    };
    let fault = s.lock().unwrap().take_fault(FaultTarget::Tarball, Some(package), Some(version));
    if let Some((delay, code)) = fault {
        if let Some(d) = delay {
            let clock = s.lock().unwrap().clock.clone();
            wait(clock, d).await;
        }
        if let Some(code) = code {
            return status(code, json!({"error": "injected fault"}));
        }
    }
    let st = s.lock().unwrap();
    let now = st.clock.now();
    match st.tarballs.get(&(package.to_string(), version.to_string())) {
        Some(tb) if tb.gone_at.is_none_or(|g| g > now) => {
            let bytes: Vec<u8> = tb.bytes.as_ref().clone();
            (StatusCode::OK, [("content-type", "application/octet-stream")], bytes).into_response()
        }
        _ => status(404, json!({"error": "not found"})),
    }
}

async fn downloads(State(s): State<Shared>, Path((period, names)): Path<(String, String)>) -> Response {
    {
        let mut st = s.lock().unwrap();
        let now = st.clock.now();
        st.metrics_log.push(now);
        if let Some(b) = st.budget.clone() {
            let horizon = now - to_delta(b.interval);
            let in_window = st.metrics_log.iter().filter(|t| **t > horizon).count();
            if in_window > b.requests_per_interval as usize {
                let msg = format!("{in_window} requests in the window ending {}", format_ts(&now));
                st.violations.push(msg);
                return status(429, json!({"error": "rate limit exceeded"}));
            }
        }
    }
    let fault = s.lock().unwrap().take_fault(FaultTarget::Metrics, None, None);
    if let Some((delay, code)) = fault {
        if let Some(d) = delay {
            let clock = s.lock().unwrap().clock.clone();
            wait(clock, d).await;
        }
        if let Some(code) = code {
            return status(code, json!({"error": "injected fault"}));
        }
    }
    let Some((start, end)) = period.split_once(':') else {
        return status(400, json!({"error": "bad period"}));
    };
    let Ok(week) = start.parse::<NaiveDate>() else {
        return status(400, json!({"error": "bad period"}));
    };
    let st = s.lock().unwrap();
    let now = st.clock.now();
    let lookup = |name: &str| -> Option<u64> {
        st.metrics
            .iter()
            .rev()
            .filter(|m| m.at <= now && m.week_start.is_none_or(|w| w == week))
            .find_map(|m| m.counts.get(name).copied())
    };
    let names: Vec<&str> = names.split(',').filter(|n| !n.is_empty()).collect();
    let point = |name: &str, n: u64| json!({"downloads": n, "start": start, "end": end, "package": name});
    if let [single] = names.as_slice() {
        return match lookup(single) {
            Some(n) => status(200, point(single, n)),
            None => status(404, json!({"error": format!("package {single} not found")})),
        };
    }
    let body: Map<String, Value> = names
        .iter()
        .map(|n| (n.to_string(), lookup(n).map_or(Value::Null, |c| point(n, c))))
        .collect();
    status(200, Value::Object(body))
}

#[derive(Deserialize)]
struct SinceQuery {
    since: Option<String>,
}

async fn advisories(State(s): State<Shared>, Query(q): Query<SinceQuery>) -> Response {
    let st = s.lock().unwrap();
    status(200, Value::Array(st.advisories(q.since.as_deref())))
}

/// HTTP mock of the registry, tarball CDN, metrics API and advisory source,
/// driven by a scenario timeline and a clock. Runs on its own thread.
pub struct MockRegistry {
    addr: SocketAddr,
    state: Shared,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockRegistry {
    pub fn start(timeline: &Timeline, clock: SharedClock) -> std::io::Result<MockRegistry> {
        Self::start_on("127.0.0.1:0", timeline, clock)
    }

    pub fn start_on(addr: &str, timeline: &Timeline, clock: SharedClock) -> std::io::Result<MockRegistry> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let base = format!("http://{addr}");
        let state = MockState::build(timeline, &base, clock)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
        let state: Shared = Arc::new(Mutex::new(state));
        let app = Router::new()
            .route("/registry/_changes", get(changes))
            .route("/tarballs/{*path}", get(tarball))
            .route("/downloads/point/{period}/{*names}", get(downloads))
            .route("/advisories", get(advisories))
            .with_state(state.clone());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::Builder::new().name("mock-registry".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })?;
        Ok(MockRegistry { addr, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Base URL for the changes feed client (`{feed_url}/_changes`).
    pub fn feed_url(&self) -> String {
        format!("{}/registry", self.base_url())
    }

    pub fn tarball_url(&self, package: &str, version: &str) -> String {
        format!("{}{}", self.base_url(), tarball_path(package, version))
    }

    /// Clock readings of every metrics request received.
    pub fn metrics_requests(&self) -> Vec<Timestamp> {
        self.state.lock().unwrap().metrics_log.clone()
    }

    /// Sliding windows that exceeded the scenario's metrics budget.
    pub fn budget_violations(&self) -> Vec<String> {
        self.state.lock().unwrap().violations.clone()
    }

    pub fn shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockRegistry {
    fn drop(&mut self) {
        self.shutdown();
    }
}
