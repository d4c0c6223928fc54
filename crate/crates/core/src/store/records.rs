use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rusqlite::types::Type;
use rusqlite::Row;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blob::BlobKey;
use crate::clock::{parse_ts, Timestamp};
use crate::semver::{ConstraintDnf, Version};

fn conversion(idx: usize, e: impl std::error::Error + Send + Sync + 'static) -> rusqlite::Error {
    rusqlite::Error::FromSqlConversionFailure(idx, Type::Text, Box::new(e))
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct BadValue(String);

fn ts(row: &Row<'_>, idx: usize) -> rusqlite::Result<Timestamp> {
    let s: String = row.get(idx)?;
    parse_ts(&s).ok_or_else(|| conversion(idx, BadValue(format!("bad timestamp {s:?}"))))
}

fn opt_ts(row: &Row<'_>, idx: usize) -> rusqlite::Result<Option<Timestamp>> {
    match row.get::<_, Option<String>>(idx)? {
        Some(s) => parse_ts(&s)
            .map(Some)
            .ok_or_else(|| conversion(idx, BadValue(format!("bad timestamp {s:?}")))),
        None => Ok(None),
    }
}

fn json(row: &Row<'_>, idx: usize) -> rusqlite::Result<Value> {
    let s: String = row.get(idx)?;
    serde_json::from_str(&s).map_err(|e| conversion(idx, e))
}

fn dnf(row: &Row<'_>, idx: usize) -> rusqlite::Result<Option<ConstraintDnf>> {
    match row.get::<_, Option<String>>(idx)? {
        Some(s) => ConstraintDnf::parse(&s).map(Some).map_err(|e| conversion(idx, e)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackageRecord {
    pub id: i64,
    pub name: String,
    pub deleted: bool,
    pub deleted_at: Option<Timestamp>,
    pub latest_known_seq: Option<String>,
    pub metadata_digest: Option<String>,
    pub extra_metadata: Value,
}

impl PackageRecord {
    pub(crate) const COLUMNS: &'static str =
        "id, name, deleted, deleted_at, latest_known_seq, metadata_digest, extra_metadata";

    pub(crate) fn from_row(row: &Row<'_>) -> rusqlite::Result<Self> {
        Ok(PackageRecord {
            id: row.get(0)?,
            name: row.get(1)?,
            deleted: row.get(2)?,
            deleted_at: opt_ts(row, 3)?,
            latest_known_seq: row.get(4)?,
            metadata_digest: row.get(5)?,
            extra_metadata: json(row, 6)?,
        })
    }
}

/// Where `published_at` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSource {
    /// The manifest's `time` map.
    Manifest,
    /// No publish time in the manifest; the ingest time was used.
    Ingest,
}

impl TimeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeSource::Manifest => "manifest",
            TimeSource::Ingest => "ingest",
        }
    }
}

impl FromStr for TimeSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "manifest" => Ok(TimeSource::Manifest),
            "ingest" => Ok(TimeSource::Ingest),
            _ => Err(format!("unknown time source {s:?}")),
        }
    }
}

/// A version row to insert.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionRow {
    /// Version string exactly as it appears in the manifest.
    pub version: String,
    pub parsed: Version,
    pub generation: i64,
    pub published_at: Timestamp,
    pub published_at_source: TimeSource,
    pub tarball_url: Option<String>,
    pub blob_key: Option<BlobKey>,
    pub manifest_digest: String,
    pub repository_host: Option<String>,
    pub repository_owner: Option<String>,
    pub repository_name: Option<String>,
    /// JSON text of the original `repository` field when it was parsed.
    pub repository_raw: Option<String>,
    pub extra_metadata: Value,
}

impl VersionRow {
    /// A first-generation row with no tarball, repository or extra metadata.
    pub fn new(version: &str, published_at: Timestamp) -> Result<Self, crate::semver::SemverError> {
        Ok(VersionRow {
            version: version.to_string(),
            parsed: Version::parse(version)?,
            generation: 0,
            published_at,
            published_at_source: TimeSource::Manifest,
            tarball_url: None,
            blob_key: None,
            manifest_digest: crate::blob::sha256_hex(version.as_bytes()),
            repository_host: None,
            repository_owner: None,
            repository_name: None,
            repository_raw: None,
            extra_metadata: Value::Object(Default::default()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VersionRecord {
    pub id: i64,
    pub package_id: i64,
    pub version: String,
    pub parsed: Version,
    pub generation: i64,
    pub published_at: Timestamp,
    pub published_at_source: TimeSource,
    pub tarball_url: Option<String>,
    pub blob_key: Option<BlobKey>,
    pub manifest_digest: String,
    pub repository_host: Option<String>,
    pub repository_owner: Option<String>,
    pub repository_name: Option<String>,
    pub repository_raw: Option<String>,
    pub deleted: bool,
    pub deleted_at: Option<Timestamp>,
    pub superseded: bool,
    pub superseded_at: Option<Timestamp>,
    pub extra_metadata: Value,
}

impl VersionRecord {
    pub(crate) const COLUMNS: &'static str = "id, package_id, version, generation, published_at, \
         published_at_source, tarball_url, blob_key, manifest_digest, repository_host, repository_owner, \
         repository_name, repository_raw, deleted, deleted_at, superseded, superseded_at, extra_metadata";

    pub(crate) fn from_row(row: &Row<'_>) -> rusqlite::Result<Self> {
        let version: String = row.get(2)?;
        let parsed = Version::parse(&version).map_err(|e| conversion(2, e))?;
        let source: String = row.get(5)?;
        Ok(VersionRecord {
            id: row.get(0)?,
            package_id: row.get(1)?,
            version,
            parsed,
            generation: row.get(3)?,
            published_at: ts(row, 4)?,
            published_at_source: source.parse().map_err(|e| conversion(5, BadValue(e)))?,
            tarball_url: row.get(6)?,
            blob_key: row.get::<_, Option<String>>(7)?.map(BlobKey::new),
            manifest_digest: row.get(8)?,
            repository_host: row.get(9)?,
            repository_owner: row.get(10)?,
            repository_name: row.get(11)?,
            repository_raw: row.get(12)?,
            deleted: row.get(13)?,
            deleted_at: opt_ts(row, 14)?,
            superseded: row.get(15)?,
            superseded_at: opt_ts(row, 16)?,
            extra_metadata: json(row, 17)?,
        })
    }

    /// Whether the version was live (published, not deleted, not superseded)
    /// at time `t`.
    pub fn live_at(&self, t: &Timestamp) -> bool {
        self.published_at <= *t
            && self.deleted_at.is_none_or(|d| d > *t)
            && self.superseded_at.is_none_or(|s| s > *t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepKind {
    Runtime,
    Dev,
    Peer,
    Optional,
}

impl DepKind {
    pub const ALL: [DepKind; 4] = [DepKind::Runtime, DepKind::Dev, DepKind::Peer, DepKind::Optional];

    pub fn as_str(self) -> &'static str {
        match self {
            DepKind::Runtime => "runtime",
            DepKind::Dev => "dev",
            DepKind::Peer => "peer",
            DepKind::Optional => "optional",
        }
    }

    /// Manifest field holding dependencies of this kind.
    pub fn manifest_field(self) -> &'static str {
        match self {
            DepKind::Runtime => "dependencies",
            DepKind::Dev => "devDependencies",
            DepKind::Peer => "peerDependencies",
            DepKind::Optional => "optionalDependencies",
        }
    }
}

impl fmt::Display for DepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        DepKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown dependency kind {s:?}"))
    }
}

/// A dependency edge to insert.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyRow {
    pub name: String,
    pub constraint_raw: String,
    /// Present iff `constraint_raw` parsed.
    pub constraint: Option<ConstraintDnf>,
    pub kind: DepKind,
}

impl DependencyRow {
    pub fn new(name: impl Into<String>, raw: impl Into<String>, kind: DepKind) -> Self {
        let raw = raw.into();
        DependencyRow { name: name.into(), constraint: ConstraintDnf::parse(&raw).ok(), constraint_raw: raw, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyRecord {
    pub id: i64,
    pub version_id: i64,
    pub depends_on_name: String,
    pub constraint_raw: String,
    pub constraint: Option<ConstraintDnf>,
    pub kind: DepKind,
}

impl DependencyRecord {
    pub(crate) const COLUMNS: &'static str = "id, version_id, depends_on_name, constraint_raw, constraint_dnf, kind";

    pub(crate) fn from_row(row: &Row<'_>) -> rusqlite::Result<Self> {
        let kind: String = row.get(5)?;
        Ok(DependencyRecord {
            id: row.get(0)?,
            version_id: row.get(1)?,
            depends_on_name: row.get(2)?,
            constraint_raw: row.get(3)?,
            constraint: dnf(row, 4)?,
            kind: kind.parse().map_err(|e| conversion(5, BadValue(e)))?,
        })
    }
}

/// Current-generation state of one version, as seen by normalize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownVersion {
    pub id: i64,
    pub version: String,
    pub generation: i64,
    pub manifest_digest: String,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownPackage {
    pub id: i64,
    pub name: String,
    pub deleted: bool,
    pub metadata_digest: Option<String>,
    /// One entry per version string: its newest generation.
    pub versions: Vec<KnownVersion>,
}

impl KnownPackage {
    pub fn version(&self, v: &str) -> Option<&KnownVersion> {
        self.versions.iter().find(|k| k.version == v)
    }
}

/// One weekly download count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub week_start: NaiveDate,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryRange {
    pub constraint_raw: String,
    pub constraint: Option<ConstraintDnf>,
}

impl AdvisoryRange {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        AdvisoryRange { constraint: ConstraintDnf::parse(&raw).ok(), constraint_raw: raw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvisoryRecord {
    pub advisory_id: String,
    pub package_name: String,
    pub severity: Option<String>,
    pub cwes: Vec<String>,
    pub withdrawn: bool,
    pub modified: Option<String>,
    pub ranges: Vec<AdvisoryRange>,
    pub raw: Value,
}
