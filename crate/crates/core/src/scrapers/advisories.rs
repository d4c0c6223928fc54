use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::store::{AdvisoryRange, AdvisoryRecord};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum AdvisoryError {
    #[error("upstream error: {0}")]
    Upstream(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AdvisoryError {
    pub fn kind(&self) -> &'static str {
        match self {
            AdvisoryError::Upstream(_) => "upstream-error",
            AdvisoryError::Store(e) => e.kind(),
        }
    }
}

/// Source of OSV-style documents. `since` is the cursor from the last sync.
pub trait AdvisorySource {
    fn source_id(&self) -> String;
    fn fetch(&self, since: Option<&str>) -> Result<Vec<Value>, AdvisoryError>;
}

/// Reads every `*.json` file under a directory. A file may hold one
/// document or an array of them. The cursor is ignored.
pub struct DirSource {
    dir: PathBuf,
}

impl DirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirSource { dir: dir.into() }
    }
}

fn read_docs(path: &Path) -> Result<Vec<Value>, AdvisoryError> {
    let text = std::fs::read_to_string(path).map_err(|e| AdvisoryError::Upstream(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| AdvisoryError::Upstream(format!("{}: {e}", path.display())))?;
    Ok(match value {
        Value::Array(items) => items,
        other => vec![other],
    })
}

impl AdvisorySource for DirSource {
    fn source_id(&self) -> String {
        format!("dir:{}", self.dir.display())
    }

    fn fetch(&self, _since: Option<&str>) -> Result<Vec<Value>, AdvisoryError> {
        let entries = std::fs::read_dir(&self.dir).map_err(|e| AdvisoryError::Upstream(e.to_string()))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut docs = Vec::new();
        for p in paths {
            docs.extend(read_docs(&p)?);
        }
        Ok(docs)
    }
}

/// `GET {base}/advisories?since=<cursor>` returning a JSON array.
pub struct HttpAdvisorySource {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpAdvisorySource {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpAdvisorySource { base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }
}

impl AdvisorySource for HttpAdvisorySource {
    fn source_id(&self) -> String {
        self.base_url.clone()
    }

    fn fetch(&self, since: Option<&str>) -> Result<Vec<Value>, AdvisoryError> {
        let mut req = self.agent.get(format!("{}/advisories", self.base_url));
        if let Some(since) = since {
            req = req.query("since", since);
        }
        let mut response = req.call().map_err(|e| AdvisoryError::Upstream(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(AdvisoryError::Upstream(format!("HTTP {status}")));
        }
        let body = response
            .body_mut()
            .with_config()
            .limit(crate::changes::MAX_BODY_BYTES)
            .read_to_string()
            .map_err(|e| AdvisoryError::Upstream(e.to_string()))?;
        match serde_json::from_str(&body) {
            Ok(Value::Array(items)) => Ok(items),
            Ok(_) => Err(AdvisoryError::Upstream("advisory response is not an array".into())),
            Err(e) => Err(AdvisoryError::Upstream(e.to_string())),
        }
    }
}

/// Turns OSV range events into constraint strings. Each introduced/fixed
/// (or introduced/last_affected) pair becomes one range; an open
/// introduced event runs to infinity.
pub fn ranges_from_events(events: &[Value]) -> Vec<String> {
    let mut out = Vec::new();
    let mut open: Option<String> = None;
    for ev in events {
        let Some(obj) = ev.as_object() else { continue };
        if let Some(v) = obj.get("introduced").and_then(Value::as_str) {
            open = Some(v.to_string());
        } else if let Some(v) = obj.get("fixed").and_then(Value::as_str) {
            out.push(bounded(open.take(), "<", v));
        } else if let Some(v) = obj.get("last_affected").and_then(Value::as_str) {
            out.push(bounded(open.take(), "<=", v));
        }
    }
    if let Some(lower) = open {
        out.push(if lower == "0" { "*".to_string() } else { format!(">={lower}") });
    }
    out
}

fn bounded(lower: Option<String>, op: &str, upper: &str) -> String {
    match lower.as_deref() {
        None | Some("0") => format!("{op}{upper}"),
        Some(l) => format!(">={l} {op}{upper}"),
    }
}

/// One record per affected package. A single-package advisory keeps its
/// id; otherwise each record is keyed `<id>/<package>`.
pub fn parse_osv(doc: &Value) -> Result<Vec<AdvisoryRecord>, String> {
    let id = doc.get("id").and_then(Value::as_str).ok_or("advisory has no id")?;
    let affected = doc.get("affected").and_then(Value::as_array).ok_or_else(|| format!("{id}: no affected list"))?;
    let mut per_package: Vec<(String, Vec<String>)> = Vec::new();
    for entry in affected {
        let Some(name) = entry.pointer("/package/name").and_then(Value::as_str) else { continue };
        let mut ranges: Vec<String> = entry
            .get("ranges")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .flat_map(|r| ranges_from_events(r.get("events").and_then(Value::as_array).map_or(&[][..], |v| v)))
            .collect();
        if ranges.is_empty() {
            ranges = entry
                .get("versions")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect();
        }
        match per_package.iter_mut().find(|(n, _)| n == name) {
            Some((_, existing)) => existing.extend(ranges),
            None => per_package.push((name.to_string(), ranges)),
        }
    }
    if per_package.is_empty() {
        return Err(format!("{id}: no affected package"));
    }
    let db = doc.get("database_specific");
    let severity = db.and_then(|d| d.get("severity")).and_then(Value::as_str).map(str::to_string);
    let cwes: Vec<String> = db
        .and_then(|d| d.get("cwe_ids"))
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default();
    let withdrawn = doc.get("withdrawn").is_some_and(|w| !w.is_null());
    let modified = doc.get("modified").and_then(Value::as_str).map(str::to_string);
    let multi = per_package.len() > 1;
    Ok(per_package
        .into_iter()
        .map(|(name, ranges)| AdvisoryRecord {
            advisory_id: if multi { format!("{id}/{name}") } else { id.to_string() },
            package_name: name,
            severity: severity.clone(),
            cwes: cwes.clone(),
            withdrawn,
            modified: modified.clone(),
            ranges: ranges.into_iter().map(AdvisoryRange::new).collect(),
            raw: doc.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AdvisorySyncReport {
    pub fetched: usize,
    pub upserted: usize,
    pub unchanged: usize,
    pub skipped: Vec<String>,
    pub unparsed_ranges: usize,
    pub cursor: Option<String>,
}

/// Pulls documents newer than the stored cursor and upserts them. The
/// cursor (max `modified`) only moves after every document is stored, so a
/// failed sync is retried from the same point.
pub fn sync_advisories(store: &Store, source: &dyn AdvisorySource) -> Result<AdvisorySyncReport, AdvisoryError> {
    let source_id = source.source_id();
    let since: Option<String> = store.with_conn(|c| {
        use rusqlite::OptionalExtension;
        c.query_row("SELECT cursor FROM advisory_sync_state WHERE source = ?1", [&source_id], |r| r.get(0))
            .optional()
    })?;
    let docs = source.fetch(since.as_deref())?;
    let mut report = AdvisorySyncReport { fetched: docs.len(), cursor: since.clone(), ..Default::default() };
    let mut records = Vec::new();
    for doc in &docs {
        match parse_osv(doc) {
            Ok(recs) => records.extend(recs),
            Err(e) => report.skipped.push(e),
        }
    }
    store.with_tx(|tx| {
        for rec in &records {
            if rec.ranges.is_empty() {
                report.skipped.push(format!("{}: no affected range", rec.advisory_id));
                continue;
            }
            report.unparsed_ranges += rec.ranges.iter().filter(|r| r.constraint.is_none()).count();
            if tx.upsert_advisory(rec)? {
                report.upserted += 1;
            } else {
                report.unchanged += 1;
            }
            if let Some(m) = &rec.modified {
                if report.cursor.as_ref().is_none_or(|c| m > c) {
                    report.cursor = Some(m.clone());
                }
            }
        }
        if let Some(c) = &report.cursor {
            tx.set_advisory_cursor(&source_id, c)?;
        }
        Ok::<_, StoreError>(())
    })?;
    for s in &report.skipped {
        tracing::warn!(advisory = %s, "advisory skipped");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn event_pairs() {
        let ev = |v: Value| ranges_from_events(v.as_array().unwrap());
        assert_eq!(ev(json!([{"introduced": "0"}, {"fixed": "1.2.2"}])), vec!["<1.2.2"]);
        assert_eq!(ev(json!([{"introduced": "1.0.0"}, {"fixed": "1.2.2"}])), vec![">=1.0.0 <1.2.2"]);
        assert_eq!(ev(json!([{"introduced": "2.0.0"}, {"last_affected": "2.1.0"}])), vec![">=2.0.0 <=2.1.0"]);
        assert_eq!(
            ev(json!([{"introduced": "0"}, {"fixed": "1.0.1"}, {"introduced": "2.0.0"}])),
            vec!["<1.0.1", ">=2.0.0"]
        );
        assert_eq!(ev(json!([{"introduced": "0"}])), vec!["*"]);
    }

    #[test]
    fn osv_document() {
        let doc = json!({
            "id": "GHSA-xxxx",
            "modified": "2024-01-02T00:00:00Z",
            "affected": [{"package": {"ecosystem": "npm", "name": "left-pad"},
                          "ranges": [{"type": "SEMVER", "events": [{"introduced": "0"}, {"fixed": "1.2.2"}]}]}],
            "database_specific": {"severity": "HIGH", "cwe_ids": ["CWE-400"]}
        });
        let recs = parse_osv(&doc).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.advisory_id, "GHSA-xxxx");
        assert_eq!(r.severity.as_deref(), Some("HIGH"));
        assert_eq!(r.cwes, vec!["CWE-400"]);
        assert!(!r.withdrawn);
        assert_eq!(r.ranges[0].constraint.as_ref().unwrap().to_string(), "<1.2.2");
    }

    #[test]
    fn versions_list_only_without_ranges() {
        let doc = json!({"id": "A", "affected": [{"package": {"name": "p"}, "versions": ["1.0.0", "1.0.1"]}]});
        let r = &parse_osv(&doc).unwrap()[0];
        assert_eq!(r.ranges.iter().map(|r| r.constraint_raw.as_str()).collect::<Vec<_>>(), vec!["1.0.0", "1.0.1"]);
    }

    #[test]
    fn multi_package_ids() {
        let doc = json!({"id": "A", "affected": [
            {"package": {"name": "p"}, "versions": ["1.0.0"]},
            {"package": {"name": "q"}, "versions": ["2.0.0"]}]});
        let ids: Vec<_> = parse_osv(&doc).unwrap().into_iter().map(|r| r.advisory_id).collect();
        assert_eq!(ids, vec!["A/p", "A/q"]);
    }

    struct Fixed(Vec<Value>);

    impl AdvisorySource for Fixed {
        fn source_id(&self) -> String {
            "fixed".into()
        }
        fn fetch(&self, _: Option<&str>) -> Result<Vec<Value>, AdvisoryError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn withdrawn_is_retained_and_unparseable_kept_raw() {
        let store = Store::open_in_memory().unwrap();
        let base = json!({"id": "A", "modified": "2024-01-01T00:00:00Z",
            "affected": [{"package": {"name": "p"}, "versions": ["not a range ~~"]}]});
        let report = sync_advisories(&store, &Fixed(vec![base.clone()])).unwrap();
        assert_eq!(report.upserted, 1);
        assert_eq!(report.unparsed_ranges, 1);
        let a = store.advisory("A").unwrap().unwrap();
        assert!(a.ranges[0].constraint.is_none());
        assert_eq!(a.ranges[0].constraint_raw, "not a range ~~");

        let mut withdrawn = base.clone();
        withdrawn["withdrawn"] = json!("2024-02-01T00:00:00Z");
        withdrawn["modified"] = json!("2024-02-01T00:00:00Z");
        sync_advisories(&store, &Fixed(vec![withdrawn])).unwrap();
        // A later copy without the flag cannot clear it.
        sync_advisories(&store, &Fixed(vec![base])).unwrap();
        let a = store.advisory("A").unwrap().unwrap();
        assert!(a.withdrawn);
        assert_eq!(store.count("vulnerabilities", "").unwrap(), 1);
    }
}
