use std::collections::{BTreeMap, HashSet};

use serde_json::{Map, Value};

use super::feed::{ChangeEvent, SeqToken};
use crate::blob::{sha256_hex, BlobKey};
use crate::clock::{parse_ts, Timestamp};
use crate::semver::Version;
use crate::store::{DepKind, DependencyRow, KnownPackage, TimeSource, VersionRow};

/// A version to insert. `supersedes` names the row of an earlier
/// generation of the same version string that this one replaces.
#[derive(Debug, Clone, PartialEq)]
pub struct NewVersion {
    pub row: VersionRow,
    pub dependencies: Vec<DependencyRow>,
    pub supersedes: Option<i64>,
}

/// A version entry that could not be interpreted. It is dead-lettered; the
/// rest of the document is still applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedVersion {
    pub version: String,
    pub error: String,
    pub raw: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedUpdate {
    pub seq: SeqToken,
    pub package_name: String,
    pub new_versions: Vec<NewVersion>,
    /// Version strings present in the store (not yet deleted) but gone from
    /// the document.
    pub removed_versions: Vec<String>,
    pub package_deleted: bool,
    pub package_undeleted: bool,
    /// New package-level metadata (digest, document) when it changed.
    pub metadata: Option<(String, Value)>,
    pub rejected_versions: Vec<RejectedVersion>,
    pub unchanged: bool,
    pub observed_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalizeError {
    #[error("invalid document: {0}")]
    InvalidDoc(String),
}

impl NormalizeError {
    pub fn kind(&self) -> &'static str {
        "invalid-doc"
    }
}

/// Digest of a JSON value in canonical form (object keys sorted).
pub fn json_digest(v: &Value) -> String {
    sha256_hex(canonical(v).to_string().as_bytes())
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Diffs one feed event against the stored view of its package.
pub fn normalize(
    event: &ChangeEvent,
    known: Option<&KnownPackage>,
    now: Timestamp,
) -> Result<NormalizedUpdate, NormalizeError> {
    let mut update = NormalizedUpdate {
        seq: event.seq.clone(),
        package_name: event.package_name.clone(),
        new_versions: Vec::new(),
        removed_versions: Vec::new(),
        package_deleted: false,
        package_undeleted: false,
        metadata: None,
        rejected_versions: Vec::new(),
        unchanged: false,
        observed_at: now,
    };

    if event.package_name.is_empty() {
        return Err(NormalizeError::InvalidDoc("empty package name".into()));
    }

    if event.deleted {
        match known {
            Some(k) if k.deleted => {}
            Some(k) => {
                update.package_deleted = true;
                update.removed_versions = k.versions.iter().filter(|v| !v.deleted).map(|v| v.version.clone()).collect();
            }
            // Record the deletion of a package never seen alive.
            None => update.package_deleted = true,
        }
        update.unchanged = !update.package_deleted;
        return Ok(update);
    }

    let doc = event
        .doc
        .as_ref()
        .ok_or_else(|| NormalizeError::InvalidDoc("live change without a document".into()))?;
    let doc = doc
        .as_object()
        .ok_or_else(|| NormalizeError::InvalidDoc("document is not an object".into()))?;
    if let Some(name) = doc.get("name") {
        if name.as_str() != Some(event.package_name.as_str()) {
            return Err(NormalizeError::InvalidDoc(format!(
                "document name {name} does not match change id {:?}",
                event.package_name
            )));
        }
    }
    let empty = Map::new();
    let versions = match doc.get("versions") {
        None => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(NormalizeError::InvalidDoc("`versions` is not an object".into())),
    };
    let times = doc.get("time").and_then(Value::as_object);

    if known.is_some_and(|k| k.deleted) {
        update.package_undeleted = true;
    }

    let metadata = package_metadata(doc, versions);
    let digest = json_digest(&metadata);
    if known.and_then(|k| k.metadata_digest.as_deref()) != Some(digest.as_str()) {
        update.metadata = Some((digest, metadata));
    }

    let mut listed = HashSet::new();
    for (key, manifest) in versions {
        listed.insert(key.as_str());
        let parsed = match Version::parse(key) {
            Ok(v) => v,
            Err(e) => {
                update.rejected_versions.push(RejectedVersion {
                    version: key.clone(),
                    error: e.to_string(),
                    raw: manifest.clone(),
                });
                continue;
            }
        };
        let Some(manifest_obj) = manifest.as_object() else {
            update.rejected_versions.push(RejectedVersion {
                version: key.clone(),
                error: "version manifest is not an object".into(),
                raw: manifest.clone(),
            });
            continue;
        };
        let manifest_digest = json_digest(manifest);
        let (generation, supersedes) = match known.and_then(|k| k.version(key)) {
            None => (0, None),
            Some(kv) if !kv.deleted && kv.manifest_digest == manifest_digest => continue,
            // Republished, or back after a deletion: a new generation.
            Some(kv) => (kv.generation + 1, Some(kv.id)),
        };
        let published = times.and_then(|t| t.get(key)).and_then(Value::as_str).and_then(parse_ts);
        let (row, dependencies) = version_row(
            &event.package_name,
            key,
            parsed,
            manifest_obj,
            manifest_digest,
            generation,
            published,
            now,
        );
        update.new_versions.push(NewVersion { row, dependencies, supersedes });
    }

    if let Some(k) = known {
        update.removed_versions = k
            .versions
            .iter()
            .filter(|v| !v.deleted && !listed.contains(v.version.as_str()))
            .map(|v| v.version.clone())
            .collect();
    }

    update.unchanged = update.new_versions.is_empty()
        && update.removed_versions.is_empty()
        && !update.package_undeleted
        && update.metadata.is_none()
        && known.is_some();
    Ok(update)
}

/// Package-level fields: the document without its per-version content and
/// CouchDB bookkeeping. The `time` map keeps only its non-version keys,
/// since per-version times are stored on the version rows.
fn package_metadata(doc: &Map<String, Value>, versions: &Map<String, Value>) -> Value {
    let mut out = Map::new();
    for (k, v) in doc {
        match k.as_str() {
            "versions" | "_id" | "_rev" | "name" => {}
            "time" => {
                if let Value::Object(t) = v {
                    let rest: Map<String, Value> =
                        t.iter().filter(|(k, _)| !versions.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
                    out.insert(k.clone(), Value::Object(rest));
                } else {
                    out.insert(k.clone(), v.clone());
                }
            }
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    Value::Object(out)
}

#[allow(clippy::too_many_arguments)]
fn version_row(
    package: &str,
    key: &str,
    parsed: Version,
    manifest: &Map<String, Value>,
    manifest_digest: String,
    generation: i64,
    published: Option<Timestamp>,
    now: Timestamp,
) -> (VersionRow, Vec<DependencyRow>) {
    let mut extra = manifest.clone();
    if extra.get("version").and_then(Value::as_str) == Some(key) {
        extra.remove("version");
    }
    if extra.get("name").and_then(Value::as_str) == Some(package) {
        extra.remove("name");
    }

    let mut dependencies = Vec::new();
    for kind in DepKind::ALL {
        let field = kind.manifest_field();
        let Some(Value::Object(map)) = extra.get(field) else { continue };
        for (name, raw) in map {
            let raw = match raw {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            dependencies.push(DependencyRow::new(name.clone(), raw, kind));
        }
        extra.remove(field);
    }

    let mut repo = (None, None, None, None);
    if let Some(r) = extra.get("repository").and_then(parse_repository) {
        let raw = extra.remove("repository").map(|v| v.to_string());
        repo = (Some(r.host), Some(r.owner), Some(r.name), raw);
    }

    let tarball_url = manifest
        .get("dist")
        .and_then(|d| d.get("tarball"))
        .and_then(Value::as_str)
        .map(str::to_string);
    let blob_key = tarball_url.as_deref().map(|url| BlobKey::for_tarball(package, key, url));
    let (published_at, published_at_source) = match published {
        Some(t) => (t, TimeSource::Manifest),
        None => (now, TimeSource::Ingest),
    };

    let row = VersionRow {
        version: key.to_string(),
        parsed,
        generation,
        published_at,
        published_at_source,
        tarball_url,
        blob_key,
        manifest_digest,
        repository_host: repo.0,
        repository_owner: repo.1,
        repository_name: repo.2,
        repository_raw: repo.3,
        extra_metadata: Value::Object(extra),
    };
    (row, dependencies)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repository {
    pub host: String,
    pub owner: String,
    pub name: String,
}

/// Interprets a manifest `repository` field (string or `{url}` object) as a
/// hosted `owner/name` repository. Anything else is left uninterpreted.
pub fn parse_repository(v: &Value) -> Option<Repository> {
    let raw = match v {
        Value::String(s) => s.as_str(),
        Value::Object(m) => m.get("url")?.as_str()?,
        _ => return None,
    };
    let raw = raw.trim();
    let shorthand_hosts = [("github:", "github.com"), ("gitlab:", "gitlab.com"), ("bitbucket:", "bitbucket.org")];
    for (prefix, host) in shorthand_hosts {
        if let Some(rest) = raw.strip_prefix(prefix) {
            return owner_name(host, rest);
        }
    }
    if !raw.contains(':') {
        return owner_name("github.com", raw);
    }
    let rest = raw.strip_prefix("git+").unwrap_or(raw);
    let (host, path) = if let Some((_, after)) = rest.split_once("://") {
        let (authority, path) = after.split_once('/')?;
        let host = authority.rsplit('@').next()?;
        let host = host.split(':').next()?;
        (host, path)
    } else {
        // scp-like: git@host:owner/name.git
        let (user_host, path) = rest.split_once(':')?;
        (user_host.rsplit('@').next()?, path)
    };
    owner_name(&host.to_ascii_lowercase(), path)
}

fn owner_name(host: &str, path: &str) -> Option<Repository> {
    let path = path.split(['#', '?']).next()?;
    let mut parts = path.trim_matches('/').split('/');
    let owner = parts.next()?;
    let name = parts.next()?;
    let name = name.strip_suffix(".git").unwrap_or(name);
    let valid = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if host.is_empty() || !valid(owner) || !valid(name) || !host.contains('.') {
        return None;
    }
    Some(Repository { host: host.to_string(), owner: owner.to_string(), name: name.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::parse_ts;
    use crate::store::KnownVersion;
    use serde_json::json;

    fn now() -> Timestamp {
        parse_ts("2024-01-01T00:00:00Z").unwrap()
    }

    fn event(doc: Value) -> ChangeEvent {
        ChangeEvent { seq: SeqToken("7".into()), package_name: "lib".into(), deleted: false, doc: Some(doc) }
    }

    fn known(versions: &[(&str, &Value)]) -> KnownPackage {
        KnownPackage {
            id: 1,
            name: "lib".into(),
            deleted: false,
            metadata_digest: None,
            versions: versions
                .iter()
                .enumerate()
                .map(|(i, (v, m))| KnownVersion {
                    id: i as i64 + 10,
                    version: v.to_string(),
                    generation: 0,
                    manifest_digest: json_digest(m),
                    deleted: false,
                })
                .collect(),
        }
    }

    #[test]
    fn only_unseen_versions_are_new() {
        let m1 = json!({"version": "1.0.0"});
        let doc = json!({"name": "lib", "versions": {"1.0.0": m1, "1.0.1": {"version": "1.0.1"}}});
        let u = normalize(&event(doc), Some(&known(&[("1.0.0", &m1)])), now()).unwrap();
        assert_eq!(u.new_versions.len(), 1);
        assert_eq!(u.new_versions[0].row.version, "1.0.1");
        assert!(u.removed_versions.is_empty());
    }

    #[test]
    fn identical_doc_is_unchanged() {
        let m1 = json!({"version": "1.0.0"});
        let doc = json!({"name": "lib", "versions": {"1.0.0": m1}});
        let mut k = known(&[("1.0.0", &m1)]);
        let first = normalize(&event(doc.clone()), Some(&k), now()).unwrap();
        k.metadata_digest = first.metadata.map(|(d, _)| d);
        let u = normalize(&event(doc), Some(&k), now()).unwrap();
        assert!(u.unchanged);
        assert!(u.new_versions.is_empty() && u.metadata.is_none());
    }

    #[test]
    fn missing_versions_are_removed() {
        let m1 = json!({"version": "1.0.0"});
        let m2 = json!({"version": "1.0.1"});
        let doc = json!({"name": "lib", "versions": {"1.0.1": m2}});
        let u = normalize(&event(doc), Some(&known(&[("1.0.0", &m1), ("1.0.1", &m2)])), now()).unwrap();
        assert_eq!(u.removed_versions, vec!["1.0.0".to_string()]);
    }

    #[test]
    fn deletion_flags_package_and_live_versions() {
        let m1 = json!({"version": "1.0.0"});
        let e = ChangeEvent { seq: SeqToken("9".into()), package_name: "lib".into(), deleted: true, doc: None };
        let u = normalize(&e, Some(&known(&[("1.0.0", &m1)])), now()).unwrap();
        assert!(u.package_deleted);
        assert_eq!(u.removed_versions, vec!["1.0.0".to_string()]);
    }

    #[test]
    fn changed_manifest_is_a_new_generation() {
        let m1 = json!({"version": "1.0.0", "dist": {"tarball": "http://a/1.tgz"}});
        let m1b = json!({"version": "1.0.0", "dist": {"tarball": "http://a/1-re.tgz"}});
        let doc = json!({"name": "lib", "versions": {"1.0.0": m1b}});
        let u = normalize(&event(doc), Some(&known(&[("1.0.0", &m1)])), now()).unwrap();
        assert_eq!(u.new_versions.len(), 1);
        assert_eq!(u.new_versions[0].row.generation, 1);
        assert_eq!(u.new_versions[0].supersedes, Some(10));
        assert!(u.removed_versions.is_empty());
    }

    #[test]
    fn fields_are_split_between_columns_and_overflow() {
        let doc = json!({
            "name": "lib",
            "time": {"1.2.0": "2020-02-02T00:00:00.000Z", "created": "2020-01-01T00:00:00.000Z"},
            "versions": {"1.2.0": {
                "name": "lib", "version": "1.2.0",
                "dependencies": {"a": "^1.0.0", "b": "git://x"},
                "devDependencies": {"t": "*"},
                "repository": {"type": "git", "url": "git+https://github.com/Org/lib.git"},
                "scripts": {"test": "node t"},
                "dist": {"tarball": "http://r/lib/-/lib-1.2.0.tgz"}
            }}
        });
        let u = normalize(&event(doc), None, now()).unwrap();
        let nv = &u.new_versions[0];
        assert_eq!(nv.row.published_at_source, TimeSource::Manifest);
        assert_eq!(nv.row.published_at, parse_ts("2020-02-02T00:00:00Z").unwrap());
        assert_eq!(nv.row.repository_owner.as_deref(), Some("Org"));
        assert_eq!(nv.row.tarball_url.as_deref(), Some("http://r/lib/-/lib-1.2.0.tgz"));
        let extra = nv.row.extra_metadata.as_object().unwrap();
        assert!(extra.contains_key("scripts") && extra.contains_key("dist"));
        assert!(!extra.contains_key("dependencies") && !extra.contains_key("repository"));
        assert_eq!(nv.dependencies.len(), 3);
        let b = nv.dependencies.iter().find(|d| d.name == "b").unwrap();
        assert!(b.constraint.is_none() && b.constraint_raw == "git://x");
        let t = nv.dependencies.iter().find(|d| d.name == "t").unwrap();
        assert_eq!(t.kind, DepKind::Dev);
        let meta = &u.metadata.as_ref().unwrap().1;
        assert_eq!(meta["time"], json!({"created": "2020-01-01T00:00:00.000Z"}));
    }

    #[test]
    fn unparseable_repository_stays_in_overflow() {
        let doc = json!({"name": "lib", "versions": {"1.0.0": {"repository": "see website"}}});
        let u = normalize(&event(doc), None, now()).unwrap();
        let row = &u.new_versions[0].row;
        assert!(row.repository_host.is_none());
        assert_eq!(row.extra_metadata["repository"], "see website");
        assert_eq!(row.published_at_source, TimeSource::Ingest);
    }

    #[test]
    fn bad_version_key_is_rejected_alone() {
        let doc = json!({"name": "lib", "versions": {"1.0": {}, "1.0.0": {}}});
        let u = normalize(&event(doc), None, now()).unwrap();
        assert_eq!(u.new_versions.len(), 1);
        assert_eq!(u.rejected_versions.len(), 1);
        assert_eq!(u.rejected_versions[0].version, "1.0");
    }

    #[test]
    fn structural_failures_are_invalid_docs() {
        for doc in [json!([1]), json!({"name": "lib", "versions": []}), json!({"name": "other"})] {
            assert!(normalize(&event(doc), None, now()).is_err());
        }
        let no_doc = ChangeEvent { seq: SeqToken("1".into()), package_name: "lib".into(), deleted: false, doc: None };
        assert!(normalize(&no_doc, None, now()).is_err());
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a":1,"b":{"x":1,"y":2}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b":{"y":2,"x":1},"a":1}"#).unwrap();
        assert_eq!(json_digest(&a), json_digest(&b));
    }

    #[test]
    fn repository_forms() {
        let cases = [
            ("github:o/n", Some(("github.com", "o", "n"))),
            ("o/n", Some(("github.com", "o", "n"))),
            ("git@gitlab.com:o/n.git", Some(("gitlab.com", "o", "n"))),
            ("https://GitHub.com/o/n/tree/main", Some(("github.com", "o", "n"))),
            ("git://github.com/o/n.git#v1", Some(("github.com", "o", "n"))),
            ("see website", None),
            ("https://example.com", None),
        ];
        for (raw, expected) in cases {
            let got = parse_repository(&json!(raw));
            let got = got.as_ref().map(|r| (r.host.as_str(), r.owner.as_str(), r.name.as_str()));
            assert_eq!(got, expected, "{raw}");
        }
    }
}
