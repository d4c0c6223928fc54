use rusqlite::{params, Connection, OptionalExtension};
use serde_json::Value;

use super::records::{AdvisoryRange, AdvisoryRecord, DependencyRow, KnownPackage, KnownVersion, MetricPoint, VersionRow};
use super::{Result, StoreError};
use crate::clock::{format_ts, Timestamp};

/// Write operations, all inside one open transaction. Every write is
/// idempotent by natural key; flags only move from unset to set, except for
/// the explicit package undelete.
pub struct StoreTx<'a> {
    conn: &'a Connection,
}

impl<'a> StoreTx<'a> {
    pub(crate) fn new(conn: &'a Connection) -> Self {
        StoreTx { conn }
    }

    pub fn conn(&self) -> &'a Connection {
        self.conn
    }

    pub fn known_package(&self, name: &str) -> Result<Option<KnownPackage>> {
        known_package(self.conn, name)
    }

    /// Returns the package id and whether the row was created.
    pub fn ensure_package(&self, name: &str) -> Result<(i64, bool)> {
        let inserted = self
            .conn
            .execute("INSERT INTO packages (name) VALUES (?1) ON CONFLICT(name) DO NOTHING", [name])?;
        let id = self
            .conn
            .query_row("SELECT id FROM packages WHERE name = ?1", [name], |r| r.get(0))?;
        Ok((id, inserted == 1))
    }

    pub fn set_package_metadata(&self, id: i64, digest: &str, extra: &Value) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE packages SET metadata_digest = ?2, extra_metadata = ?3
             WHERE id = ?1 AND metadata_digest IS NOT ?2",
            params![id, digest, extra.to_string()],
        )?;
        Ok(n == 1)
    }

    pub fn set_package_seq(&self, id: i64, seq: &str) -> Result<()> {
        self.conn
            .execute("UPDATE packages SET latest_known_seq = ?2 WHERE id = ?1", params![id, seq])?;
        Ok(())
    }

    pub fn flag_package_deleted(&self, id: i64, at: &Timestamp) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE packages SET deleted = 1, deleted_at = ?2 WHERE id = ?1 AND deleted = 0",
            params![id, format_ts(at)],
        )?;
        Ok(n == 1)
    }

    pub fn undelete_package(&self, id: i64) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE packages SET deleted = 0, deleted_at = NULL WHERE id = ?1 AND deleted = 1",
            [id],
        )?;
        Ok(n == 1)
    }

    /// Returns the version id and whether the row was created.
    pub fn insert_version(&self, package_id: i64, row: &VersionRow) -> Result<(i64, bool)> {
        let v = &row.parsed;
        let inserted = self.conn.execute(
            "INSERT INTO versions (package_id, version, major, minor, patch, prerelease, version_key,
                 generation, published_at, published_at_source, tarball_url, blob_key, manifest_digest,
                 repository_host, repository_owner, repository_name, repository_raw, extra_metadata)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18)
             ON CONFLICT(package_id, version, generation) DO NOTHING",
            params![
                package_id,
                row.version,
                v.major as i64,
                v.minor as i64,
                v.patch as i64,
                v.prerelease_str(),
                v.sort_key(),
                row.generation,
                format_ts(&row.published_at),
                row.published_at_source.as_str(),
                row.tarball_url,
                row.blob_key.as_ref().map(|k| k.as_str()),
                row.manifest_digest,
                row.repository_host,
                row.repository_owner,
                row.repository_name,
                row.repository_raw,
                row.extra_metadata.to_string(),
            ],
        )?;
        let id = self.conn.query_row(
            "SELECT id FROM versions WHERE package_id = ?1 AND version = ?2 AND generation = ?3",
            params![package_id, row.version, row.generation],
            |r| r.get(0),
        )?;
        Ok((id, inserted == 1))
    }

    pub fn flag_version_deleted(&self, id: i64, at: &Timestamp) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE versions SET deleted = 1, deleted_at = ?2 WHERE id = ?1 AND deleted = 0",
            params![id, format_ts(at)],
        )?;
        Ok(n == 1)
    }

    pub fn flag_version_superseded(&self, id: i64, at: &Timestamp) -> Result<bool> {
        let n = self.conn.execute(
            "UPDATE versions SET superseded = 1, superseded_at = ?2 WHERE id = ?1 AND superseded = 0",
            params![id, format_ts(at)],
        )?;
        Ok(n == 1)
    }

    /// Inserts edges not yet present; returns how many were new.
    pub fn insert_dependencies(&self, version_id: i64, deps: &[DependencyRow]) -> Result<usize> {
        let mut inserted = 0;
        let mut edge = self.conn.prepare_cached(
            "INSERT INTO dependencies (version_id, depends_on_name, constraint_raw, constraint_dnf, kind)
             VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(version_id, kind, depends_on_name) DO NOTHING",
        )?;
        let mut disjunct = self
            .conn
            .prepare_cached("INSERT INTO constraint_disjuncts (dependency_id, disjunct) VALUES (?1, ?2)")?;
        let mut term = self.conn.prepare_cached(
            "INSERT INTO constraint_terms (dependency_id, disjunct, op, bound, bound_key, major, minor, patch, prerelease)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
        )?;
        for dep in deps {
            let n = edge.execute(params![
                version_id,
                dep.name,
                dep.constraint_raw,
                dep.constraint.as_ref().map(|c| c.to_string()),
                dep.kind.as_str(),
            ])?;
            if n == 0 {
                continue;
            }
            inserted += 1;
            let dep_id = self.conn.last_insert_rowid();
            let Some(dnf) = &dep.constraint else { continue };
            for (i, conjunct) in dnf.disjuncts().iter().enumerate() {
                disjunct.execute(params![dep_id, i as i64])?;
                for c in conjunct {
                    let b = &c.bound;
                    term.execute(params![
                        dep_id,
                        i as i64,
                        c.op.symbol(),
                        b.minimal().to_string(),
                        b.sort_key(),
                        b.major as i64,
                        b.minor as i64,
                        b.patch as i64,
                        b.prerelease_str(),
                    ])?;
                }
            }
        }
        Ok(inserted)
    }

    pub fn set_cursor(&self, feed_id: &str, cursor: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO feed_state (feed_id, cursor) VALUES (?1, ?2)
             ON CONFLICT(feed_id) DO UPDATE SET cursor = excluded.cursor",
            params![feed_id, cursor],
        )?;
        Ok(())
    }

    pub fn record_dead_letter(
        &self,
        feed_id: &str,
        seq: &str,
        package_name: Option<&str>,
        raw: &str,
        error: &str,
        at: &Timestamp,
    ) -> Result<()> {
        self.conn.execute(
            "INSERT INTO dead_letters (feed_id, seq, package_name, raw, error, recorded_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![feed_id, seq, package_name, raw, error, format_ts(at)],
        )?;
        Ok(())
    }

    /// Appends a weekly point unless the series already covers that week.
    /// History is never rewritten: a point older than the newest is dropped.
    pub fn append_metric_point(&self, package_id: i64, point: MetricPoint) -> Result<bool> {
        let raw: Option<String> = self
            .conn
            .query_row(
                "SELECT download_counts FROM download_metrics WHERE package_id = ?1",
                [package_id],
                |r| r.get(0),
            )
            .optional()?;
        let mut series: Vec<MetricPoint> = match &raw {
            Some(raw) => serde_json::from_str(raw)?,
            None => Vec::new(),
        };
        if series.last().is_some_and(|last| last.week_start >= point.week_start) {
            return Ok(false);
        }
        series.push(point);
        self.conn.execute(
            "INSERT INTO download_metrics (package_id, download_counts) VALUES (?1, ?2)
             ON CONFLICT(package_id) DO UPDATE SET download_counts = excluded.download_counts",
            params![package_id, serde_json::to_string(&series)?],
        )?;
        Ok(true)
    }

    pub fn record_metric_failure(&self, package: &str, week_start: &str, error: &str, at: &Timestamp) -> Result<()> {
        self.conn.execute(
            "INSERT INTO metric_fetch_failures (package_name, week_start, error, recorded_at)
             VALUES (?1, ?2, ?3, ?4)",
            params![package, week_start, error, format_ts(at)],
        )?;
        Ok(())
    }

    /// Inserts or refreshes an advisory. `withdrawn` is sticky. Returns
    /// whether anything changed.
    pub fn upsert_advisory(&self, a: &AdvisoryRecord) -> Result<bool> {
        if a.ranges.is_empty() {
            return Err(StoreError::ConstraintViolation(format!(
                "advisory {} has no affected range",
                a.advisory_id
            )));
        }
        if let Some(existing) = load_advisory(self.conn, &a.advisory_id)? {
            let merged = AdvisoryRecord { withdrawn: existing.withdrawn || a.withdrawn, ..a.clone() };
            if merged == existing {
                return Ok(false);
            }
        }
        let cwes = serde_json::to_string(&a.cwes)?;
        self.conn.execute(
            "INSERT INTO vulnerabilities (advisory_id, package_name, severity, cwes, withdrawn, modified, raw)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)
             ON CONFLICT(advisory_id) DO UPDATE SET
                package_name = excluded.package_name,
                severity = excluded.severity,
                cwes = excluded.cwes,
                withdrawn = MAX(withdrawn, excluded.withdrawn),
                modified = excluded.modified,
                raw = excluded.raw",
            params![a.advisory_id, a.package_name, a.severity, cwes, a.withdrawn, a.modified, a.raw.to_string()],
        )?;
        let id: i64 = self.conn.query_row(
            "SELECT id FROM vulnerabilities WHERE advisory_id = ?1",
            [&a.advisory_id],
            |r| r.get(0),
        )?;
        self.conn
            .execute("DELETE FROM vulnerability_ranges WHERE vulnerability_id = ?1", [id])?;
        for (i, range) in a.ranges.iter().enumerate() {
            self.conn.execute(
                "INSERT INTO vulnerability_ranges (vulnerability_id, ordinal, constraint_raw, constraint_dnf)
                 VALUES (?1, ?2, ?3, ?4)",
                params![id, i as i64, range.constraint_raw, range.constraint.as_ref().map(|c| c.to_string())],
            )?;
        }
        Ok(true)
    }

    pub fn set_advisory_cursor(&self, source: &str, cursor: &str) -> Result<()> {
        self.conn.execute(
            "INSERT INTO advisory_sync_state (source, cursor) VALUES (?1, ?2)
             ON CONFLICT(source) DO UPDATE SET cursor = excluded.cursor",
            params![source, cursor],
        )?;
        Ok(())
    }
}

pub(crate) fn known_package(conn: &Connection, name: &str) -> Result<Option<KnownPackage>> {
    let Some((id, deleted, metadata_digest)) = conn
        .query_row(
            "SELECT id, deleted, metadata_digest FROM packages WHERE name = ?1",
            [name],
            |r| Ok((r.get::<_, i64>(0)?, r.get::<_, bool>(1)?, r.get::<_, Option<String>>(2)?)),
        )
        .optional()?
    else {
        return Ok(None);
    };
    let mut stmt = conn.prepare_cached(
        "SELECT id, version, generation, manifest_digest, deleted FROM versions
         WHERE package_id = ?1 AND superseded = 0 ORDER BY id",
    )?;
    let versions = stmt
        .query_map([id], |r| {
            Ok(KnownVersion {
                id: r.get(0)?,
                version: r.get(1)?,
                generation: r.get(2)?,
                manifest_digest: r.get(3)?,
                deleted: r.get(4)?,
            })
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(Some(KnownPackage { id, name: name.to_string(), deleted, metadata_digest, versions }))
}

pub(crate) fn load_advisory(conn: &Connection, advisory_id: &str) -> Result<Option<AdvisoryRecord>> {
    let row = conn
        .query_row(
            "SELECT id, package_name, severity, cwes, withdrawn, modified, raw FROM vulnerabilities
             WHERE advisory_id = ?1",
            [advisory_id],
            |r| {
                Ok((
                    r.get::<_, i64>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, bool>(4)?,
                    r.get::<_, Option<String>>(5)?,
                    r.get::<_, String>(6)?,
                ))
            },
        )
        .optional()?;
    let Some((id, package_name, severity, cwes, withdrawn, modified, raw)) = row else {
        return Ok(None);
    };
    let mut stmt = conn.prepare_cached(
        "SELECT constraint_raw FROM vulnerability_ranges WHERE vulnerability_id = ?1 ORDER BY ordinal",
    )?;
    let ranges = stmt
        .query_map([id], |r| r.get::<_, String>(0))?
        .map(|r| r.map(AdvisoryRange::new))
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(Some(AdvisoryRecord {
        advisory_id: advisory_id.to_string(),
        package_name,
        severity,
        cwes: serde_json::from_str(&cwes)?,
        withdrawn,
        modified,
        ranges,
        raw: serde_json::from_str(&raw)?,
    }))
}
