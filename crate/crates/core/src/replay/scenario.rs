use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::clock::{parse_ts, to_delta, Timestamp};
use crate::scrapers::RateBudget;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario invalid: {0}")]
    Invalid(String),
}

impl ScenarioError {
    pub fn kind(&self) -> &'static str {
        "scenario-invalid"
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// One scripted registry history. See `docs/scenario-format.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_start")]
    pub start: Timestamp,
    /// Budget the mock metrics API enforces and the sweep is configured with.
    #[serde(default)]
    pub metrics_budget: Option<RateBudget>,
    pub events: Vec<ScriptEvent>,
}

fn default_start() -> Timestamp {
    parse_ts("2024-01-01T00:00:00Z").expect("valid literal")
}

/// Seconds after `start`, or an absolute timestamp. Missing means "same
/// time as the previous event".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum At {
    Offset(f64),
    Absolute(Timestamp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<At>,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Publish {
        package: String,
        version: String,
        /// Extra manifest fields (`dependencies`, `scripts`, ...).
        #[serde(default)]
        manifest: Map<String, Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tarball: Option<TarballSpec>,
    },
    DeleteVersion {
        package: String,
        version: String,
    },
    DeletePackage {
        package: String,
    },
    Advisory {
        doc: Value,
    },
    WithdrawAdvisory {
        id: String,
    },
    Metrics {
        /// Week the counts belong to; absent means any week.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        week_start: Option<NaiveDate>,
        counts: BTreeMap<String, u64>,
    },
    Fault(Fault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Tarball,
    Metrics,
    Feed,
}

fn one() -> Option<u32> {
    Some(1)
}

/// Makes matching requests (at or after the event time) misbehave: first
/// wait `delay_secs` on the clock, then answer `status` instead of the
/// normal response. `times: null` never expires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub target: FaultTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_secs: Option<u64>,
    #[serde(default = "one")]
    pub times: Option<u32>,
}

impl Fault {
    pub fn matches(&self, target: FaultTarget, package: Option<&str>, version: Option<&str>) -> bool {
        self.target == target
            && self.package.as_deref().is_none_or(|p| Some(p) == package)
            && self.version.as_deref().is_none_or(|v| Some(v) == version)
    }

    pub fn delay(&self) -> Option<Duration> {
        self.delay_secs.map(Duration::from_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TarballSpec {
    Text(String),
    Base64 { base64: String },
    Synthetic { size: u64, #[serde(default)] seed: u64 },
}

impl TarballSpec {
    pub fn bytes(&self) -> Result<Vec<u8>, ScenarioError> {
        match self {
            TarballSpec::Text(s) => Ok(s.clone().into_bytes()),
            TarballSpec::Base64 { base64 } => base64::engine::general_purpose::STANDARD
                .decode(base64)
                .map_err(|e| invalid(format!("bad base64 tarball: {e}"))),
            TarballSpec::Synthetic { size, seed } => Ok(synthetic_bytes(*size, *seed)),
        }
    }
}

/// Deterministic filler: SHA-256 over `(seed, block index)`, concatenated.
pub fn synthetic_bytes(size: u64, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(size as usize);
    let mut block = 0u64;
    while (out.len() as u64) < size {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(block.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        block += 1;
    }
    out.truncate(size as usize);
    out
}

/// A validated scenario with every event time resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub name: String,
    pub start: Timestamp,
    pub metrics_budget: Option<RateBudget>,
    pub events: Vec<(Timestamp, Op)>,
}

impl Timeline {
    /// Distinct event times in order.
    pub fn times(&self) -> Vec<Timestamp> {
        let mut out: Vec<Timestamp> = self.events.iter().map(|(t, _)| *t).collect();
        out.dedup();
        out
    }

    pub fn tarball_bytes(package: &str, version: &str, spec: Option<&TarballSpec>) -> Result<Vec<u8>, ScenarioError> {
        match spec {
            Some(s) => s.bytes(),
            None => Ok(format!("tarball {package}@{version}").into_bytes()),
        }
    }

    /// Moves every event by the same amount so the script starts at `start`.
    pub fn rebased(mut self, start: Timestamp) -> Self {
        let shift = start - self.start;
        self.start = start;
        for (t, _) in &mut self.events {
            *t += shift;
        }
        self
    }
}

/// `MAJOR.MINOR.PATCH` with optional `-pre` and `+build`, numbers without
/// leading zeros.
fn plain_semver(s: &str) -> bool {
    let core_end = s.find(['-', '+']).unwrap_or(s.len());
    let parts: Vec<&str> = s[..core_end].split('.').collect();
    let numeric = |p: &&str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()) && (p.len() == 1 || !p.starts_with('0'));
    let ident = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-');
    let rest = &s[core_end..];
    let (pre, build) = match rest.strip_prefix('-') {
        Some(r) => match r.split_once('+') {
            Some((p, b)) => (Some(p), Some(b)),
            None => (Some(r), None),
        },
        None => (None, rest.strip_prefix('+')),
    };
    parts.len() == 3
        && parts.iter().all(numeric)
        && pre.is_none_or(|p| p.split('.').all(ident))
        && build.is_none_or(|b| b.split('.').all(ident))
        && (rest.is_empty() || pre.is_some() || build.is_some())
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<Timeline, ScenarioError> {
        if let Some(b) = &self.metrics_budget {
            b.validate().map_err(|e| invalid(format!("metrics_budget: {e}")))?;
        }
        let mut events = Vec::with_capacity(self.events.len());
        let mut last = self.start;
        // package -> (live versions, every version ever published, deleted)
        let mut packages: BTreeMap<&str, (BTreeSet<&str>, BTreeSet<&str>, bool)> = BTreeMap::new();
        let mut advisories: BTreeSet<String> = BTreeSet::new();
        for (i, ev) in self.events.iter().enumerate() {
            let at = match ev.at {
                None => last,
                Some(At::Offset(s)) if s.is_finite() && s >= 0.0 => {
                    self.start + to_delta(Duration::from_secs_f64(s))
                }
                Some(At::Offset(s)) => return Err(invalid(format!("event {i}: bad offset {s}"))),
                Some(At::Absolute(t)) => t,
            };
            if at < last {
                return Err(invalid(format!("event {i}: time goes backwards")));
            }
            last = at;
            let ctx = |m: String| invalid(format!("event {i}: {m}"));
            match &ev.op {
                Op::Publish { package, version, tarball, .. } => {
                    if package.is_empty() {
                        return Err(ctx("empty package name".into()));
                    }
                    if !plain_semver(version) {
                        return Err(ctx(format!("{version:?} is not a plain semver version")));
                    }
                    let entry = packages.entry(package).or_default();
                    if !entry.1.insert(version) {
                        return Err(ctx(format!("{package}@{version} published twice")));
                    }
                    entry.0.insert(version);
                    entry.2 = false;
                    let bytes = Timeline::tarball_bytes(package, version, tarball.as_ref()).map_err(|e| ctx(e.to_string()))?;
                    if bytes.is_empty() {
                        return Err(ctx("empty tarball".into()));
                    }
                }
                Op::DeleteVersion { package, version } => {
                    let live = packages.get_mut(package.as_str()).filter(|p| !p.2).map(|p| p.0.remove(version.as_str()));
                    if live != Some(true) {
                        return Err(ctx(format!("{package}@{version} is not live")));
                    }
                }
                Op::DeletePackage { package } => match packages.get_mut(package.as_str()) {
                    Some(p) if !p.2 => {
                        p.0.clear();
                        p.2 = true;
                    }
                    _ => return Err(ctx(format!("{package} is not live"))),
                },
                Op::Advisory { doc } => {
                    let id = doc.get("id").and_then(Value::as_str).ok_or_else(|| ctx("advisory without id".into()))?;
                    advisories.insert(id.to_string());
                }
                Op::WithdrawAdvisory { id } => {
                    if !advisories.contains(id) {
                        return Err(ctx(format!("unknown advisory {id}")));
                    }
                }
                Op::Metrics { .. } => {}
                Op::Fault(f) => {
                    if f.status.is_none() && f.delay_secs.is_none() {
                        return Err(ctx("fault needs a status or a delay".into()));
                    }
                    if f.times == Some(0) {
                        return Err(ctx("fault times must be positive".into()));
                    }
                    // Keeps the expected state independent of sweep batching.
                    if f.target == FaultTarget::Metrics && f.times.is_none_or(|n| n >= 5) {
                        return Err(ctx("metrics faults must expire within 4 requests".into()));
                    }
                }
            }
            events.push((at, ev.op.clone()));
        }
        Ok(Timeline { name: self.name.clone(), start: self.start, metrics_budget: self.metrics_budget.clone(), events })
    }
}
