//! Relational metadata store (SQLite).
//!
//! The core tables (`packages`, `versions`, `dependencies`, metrics,
//! advisories, the download queue) live in the main database. Materialized
//! analyses live in an attached database named `metadata_analysis`, so
//! queries can name e.g. `metadata_analysis.version_direct_runtime_deps`.
//! DDL: `schema/schema.sql` and `schema/analysis.sql`.

mod records;
mod tx;

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use rusqlite::types::ValueRef;
use rusqlite::{params, Connection, OptionalExtension, ToSql, TransactionBehavior};
use serde::Serialize;
use serde_json::Value;

pub use records::{
    AdvisoryRange, AdvisoryRecord, DepKind, DependencyRecord, DependencyRow, KnownPackage, KnownVersion,
    MetricPoint, PackageRecord, TimeSource, VersionRecord, VersionRow,
};
pub use tx::StoreTx;

pub const SCHEMA: &str = include_str!("../../schema/schema.sql");
pub const ANALYSIS_SCHEMA: &str = include_str!("../../schema/analysis.sql");
pub const SCHEMA_VERSION: i64 = 1;
pub const ANALYSIS_DB: &str = "metadata_analysis";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: i64, expected: i64 },
    #[error("corrupt stored value: {0}")]
    Corrupt(String),
}

impl StoreError {
    pub fn kind(&self) -> &'static str {
        match self {
            StoreError::Unavailable(_) => "store-unavailable",
            StoreError::ConstraintViolation(_) => "constraint-violation",
            StoreError::Query(_) => "query-error",
            StoreError::SchemaVersion { .. } => "schema-version",
            StoreError::Corrupt(_) => "corrupt-value",
        }
    }

    /// Worth retrying the same operation later.
    pub fn is_transient(&self) -> bool {
        matches!(self, StoreError::Unavailable(_))
    }
}

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        use rusqlite::ErrorCode;
        match e.sqlite_error_code() {
            Some(ErrorCode::ConstraintViolation) => StoreError::ConstraintViolation(e.to_string()),
            Some(
                ErrorCode::DatabaseBusy
                | ErrorCode::DatabaseLocked
                | ErrorCode::CannotOpen
                | ErrorCode::SystemIoFailure
                | ErrorCode::DiskFull,
            ) => StoreError::Unavailable(e.to_string()),
            _ => StoreError::Query(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Corrupt(e.to_string())
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Result of a read-only ad hoc query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

pub struct Store {
    conn: Mutex<Connection>,
    path: Option<PathBuf>,
}

impl Store {
    /// Opens a file-backed store; the analysis database sits next to it as
    /// `<path>.analysis`.
    pub fn open(path: impl AsRef<Path>) -> Result<Store> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| StoreError::Unavailable(e.to_string()))?;
        }
        let conn = Connection::open(&path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        let mut analysis = path.clone().into_os_string();
        analysis.push(".analysis");
        let analysis = analysis.to_string_lossy().into_owned();
        Store::init(conn, &analysis, Some(path))
    }

    pub fn open_in_memory() -> Result<Store> {
        Store::init(Connection::open_in_memory()?, ":memory:", None)
    }

    fn init(conn: Connection, analysis: &str, path: Option<PathBuf>) -> Result<Store> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute("ATTACH DATABASE ?1 AS metadata_analysis", [analysis])?;
        if path.is_some() {
            conn.pragma_update(Some(rusqlite::DatabaseName::Attached(ANALYSIS_DB)), "journal_mode", "WAL")?;
        }
        let found: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        if found != 0 && found != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion { found, expected: SCHEMA_VERSION });
        }
        conn.execute_batch(SCHEMA)?;
        let analysis_ddl = ANALYSIS_SCHEMA
            .replace("CREATE TABLE IF NOT EXISTS ", "CREATE TABLE IF NOT EXISTS metadata_analysis.")
            .replace("CREATE INDEX IF NOT EXISTS ", "CREATE INDEX IF NOT EXISTS metadata_analysis.");
        conn.execute_batch(&analysis_ddl)?;
        conn.pragma_update(None, "user_version", SCHEMA_VERSION)?;
        Ok(Store { conn: Mutex::new(conn), path })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` inside one immediate transaction; commits iff `f` succeeds.
    pub fn with_tx<T, E>(&self, f: impl FnOnce(&StoreTx<'_>) -> std::result::Result<T, E>) -> std::result::Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(StoreError::from)?;
        let value = f(&StoreTx::new(&tx))?;
        tx.commit().map_err(StoreError::from)?;
        Ok(value)
    }

    /// Direct access to the connection for read paths.
    pub fn with_conn<T>(&self, f: impl FnOnce(&Connection) -> rusqlite::Result<T>) -> Result<T> {
        let conn = self.lock();
        Ok(f(&conn)?)
    }

    /// Runs a read-only SQL statement and returns all rows as JSON values.
    pub fn query(&self, sql: &str, params: &[&dyn ToSql]) -> Result<QueryResult> {
        let conn = self.lock();
        let mut stmt = conn.prepare(sql)?;
        if !stmt.readonly() {
            return Err(StoreError::Query("only read-only statements are allowed".into()));
        }
        let columns: Vec<String> = stmt.column_names().iter().map(|c| c.to_string()).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt.query(params)?;
        while let Some(row) = cursor.next()? {
            let mut out = Vec::with_capacity(width);
            for i in 0..width {
                out.push(match row.get_ref(i)? {
                    ValueRef::Null => Value::Null,
                    ValueRef::Integer(n) => Value::from(n),
                    ValueRef::Real(f) => Value::from(f),
                    ValueRef::Text(t) => Value::from(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(b) => Value::from(hex::encode(b)),
                });
            }
            rows.push(out);
        }
        Ok(QueryResult { columns, rows })
    }

    /// Total bytes held in the metadata tables, counted as the sum of the
    /// stored length of every column value.
    pub fn metadata_bytes(&self) -> Result<u64> {
        let conn = self.lock();
        let mut total = 0i64;
        for table in ["packages", "versions", "dependencies", "constraint_disjuncts", "constraint_terms"] {
            let mut stmt = conn.prepare(&format!("SELECT name FROM pragma_table_info('{table}')"))?;
            let cols: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
            let expr = cols
                .iter()
                .map(|c| format!("COALESCE(length({c}), 0)"))
                .collect::<Vec<_>>()
                .join(" + ");
            let sum: Option<i64> = conn.query_row(&format!("SELECT SUM({expr}) FROM {table}"), [], |r| r.get(0))?;
            total += sum.unwrap_or(0);
        }
        Ok(total as u64)
    }

    pub fn cursor(&self, feed_id: &str) -> Result<Option<String>> {
        self.with_conn(|c| {
            c.query_row("SELECT cursor FROM feed_state WHERE feed_id = ?1", [feed_id], |r| r.get(0))
                .optional()
        })
    }

    pub fn package_by_name(&self, name: &str) -> Result<Option<PackageRecord>> {
        let conn = self.lock();
        conn.query_row(
            &format!("SELECT {} FROM packages WHERE name = ?1", PackageRecord::COLUMNS),
            [name],
            PackageRecord::from_row,
        )
        .optional()
        .map_err(StoreError::from)
    }

    pub fn packages(&self) -> Result<Vec<PackageRecord>> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!("SELECT {} FROM packages ORDER BY name", PackageRecord::COLUMNS))?;
        let rows = stmt.query_map([], PackageRecord::from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// The store's view of one package, as input for normalizing an event.
    pub fn known_package(&self, name: &str) -> Result<Option<KnownPackage>> {
        let conn = self.lock();
        tx::known_package(&conn, name)
    }

    /// All version rows of a package, every generation, in id order.
    pub fn versions_of(&self, package_id: i64) -> Result<Vec<VersionRecord>> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {} FROM versions WHERE package_id = ?1 ORDER BY id",
            VersionRecord::COLUMNS
        ))?;
        let rows = stmt.query_map([package_id], VersionRecord::from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn all_versions(&self) -> Result<Vec<VersionRecord>> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!("SELECT {} FROM versions ORDER BY id", VersionRecord::COLUMNS))?;
        let rows = stmt.query_map([], VersionRecord::from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn version(&self, id: i64) -> Result<Option<VersionRecord>> {
        let conn = self.lock();
        conn.query_row(
            &format!("SELECT {} FROM versions WHERE id = ?1", VersionRecord::COLUMNS),
            [id],
            VersionRecord::from_row,
        )
        .optional()
        .map_err(StoreError::from)
    }

    pub fn dependencies_of(&self, version_id: i64) -> Result<Vec<DependencyRecord>> {
        let conn = self.lock();
        let mut stmt = conn.prepare(&format!(
            "SELECT {} FROM dependencies WHERE version_id = ?1 ORDER BY kind, depends_on_name",
            DependencyRecord::COLUMNS
        ))?;
        let rows = stmt.query_map([version_id], DependencyRecord::from_row)?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn metric_series(&self, package_id: i64) -> Result<Vec<MetricPoint>> {
        let raw: Option<String> = self.with_conn(|c| {
            c.query_row(
                "SELECT download_counts FROM download_metrics WHERE package_id = ?1",
                [package_id],
                |r| r.get(0),
            )
            .optional()
        })?;
        match raw {
            Some(raw) => Ok(serde_json::from_str(&raw)?),
            None => Ok(Vec::new()),
        }
    }

    pub fn advisory(&self, advisory_id: &str) -> Result<Option<AdvisoryRecord>> {
        let conn = self.lock();
        tx::load_advisory(&conn, advisory_id)
    }

    pub fn advisories(&self) -> Result<Vec<AdvisoryRecord>> {
        let conn = self.lock();
        let ids: Vec<String> = {
            let mut stmt = conn.prepare("SELECT advisory_id FROM vulnerabilities ORDER BY advisory_id")?;
            let rows = stmt.query_map([], |r| r.get(0))?;
            rows.collect::<Result<_, _>>()?
        };
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(a) = tx::load_advisory(&conn, &id)? {
                out.push(a);
            }
        }
        Ok(out)
    }

    pub fn count(&self, table: &str, filter: &str) -> Result<i64> {
        let sql = if filter.is_empty() {
            format!("SELECT COUNT(*) FROM {table}")
        } else {
            format!("SELECT COUNT(*) FROM {table} WHERE {filter}")
        };
        self.with_conn(|c| c.query_row(&sql, [], |r| r.get(0)))
    }

    /// Version ids whose version satisfies the stored DNF of dependency
    /// `dependency_id`, evaluated entirely in SQL over `constraint_terms`.
    pub fn versions_satisfying_sql(&self, dependency_id: i64, package_id: i64) -> Result<Vec<i64>> {
        self.with_conn(|c| {
            let mut stmt = c.prepare(SQL_SATISFYING)?;
            let rows = stmt.query_map(params![dependency_id, package_id], |r| r.get(0))?;
            rows.collect()
        })
    }
}

// A version satisfies a disjunct when no term of that disjunct is false for
// it, and, if it is a prerelease, some term carries a prerelease bound on the
// same core triple.
const SQL_SATISFYING: &str = "
SELECT v.id FROM versions v
WHERE v.package_id = ?2
  AND EXISTS (
    SELECT 1 FROM constraint_disjuncts d
    WHERE d.dependency_id = ?1
      AND NOT EXISTS (
        SELECT 1 FROM constraint_terms t
        WHERE t.dependency_id = d.dependency_id AND t.disjunct = d.disjunct
          AND NOT CASE t.op
            WHEN '>=' THEN v.version_key >= t.bound_key
            WHEN '>'  THEN v.version_key >  t.bound_key
            WHEN '<=' THEN v.version_key <= t.bound_key
            WHEN '<'  THEN v.version_key <  t.bound_key
            ELSE v.version_key = t.bound_key
          END)
      AND (v.prerelease = '' OR EXISTS (
        SELECT 1 FROM constraint_terms t
        WHERE t.dependency_id = d.dependency_id AND t.disjunct = d.disjunct
          AND t.prerelease <> ''
          AND t.major = v.major AND t.minor = v.minor AND t.patch = v.patch)))
ORDER BY v.id";
