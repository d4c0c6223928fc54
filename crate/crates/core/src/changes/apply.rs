use rusqlite::{params, OptionalExtension};
use serde::Serialize;
use serde_json::json;

use super::feed::{ChangeEvent, SeqToken};
use super::normalize::NormalizedUpdate;
use crate::clock::Timestamp;
use crate::pipeline::queue;
use crate::store::{Result, StoreTx};

/// What one `apply` actually wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ApplySummary {
    pub packages_created: usize,
    pub metadata_updated: usize,
    pub versions_inserted: usize,
    pub dependencies_inserted: usize,
    pub versions_superseded: usize,
    pub versions_flagged_deleted: usize,
    pub packages_flagged_deleted: usize,
    pub packages_undeleted: usize,
    pub jobs_enqueued: usize,
    pub dead_letters: usize,
}

impl ApplySummary {
    /// Row writes, not counting the cursor.
    pub fn writes(&self) -> usize {
        self.packages_created
            + self.metadata_updated
            + self.versions_inserted
            + self.dependencies_inserted
            + self.versions_superseded
            + self.versions_flagged_deleted
            + self.packages_flagged_deleted
            + self.packages_undeleted
            + self.jobs_enqueued
            + self.dead_letters
    }

    pub fn add(&mut self, o: &ApplySummary) {
        self.packages_created += o.packages_created;
        self.metadata_updated += o.metadata_updated;
        self.versions_inserted += o.versions_inserted;
        self.dependencies_inserted += o.dependencies_inserted;
        self.versions_superseded += o.versions_superseded;
        self.versions_flagged_deleted += o.versions_flagged_deleted;
        self.packages_flagged_deleted += o.packages_flagged_deleted;
        self.packages_undeleted += o.packages_undeleted;
        self.jobs_enqueued += o.jobs_enqueued;
        self.dead_letters += o.dead_letters;
    }
}

/// Writes one normalized update and advances the feed cursor in the same
/// transaction. Safe to repeat: every step is keyed and flag updates only
/// touch rows whose flag is still unset.
pub fn apply(tx: &StoreTx<'_>, feed_id: &str, u: &NormalizedUpdate) -> Result<ApplySummary> {
    let mut s = ApplySummary::default();
    let now = &u.observed_at;

    for r in &u.rejected_versions {
        let raw = json!({ "version": r.version, "manifest": r.raw }).to_string();
        s.dead_letters += dead_letter_once(tx, feed_id, &u.seq, Some(&u.package_name), &raw, &r.error, now)?;
    }

    if !u.unchanged {
        let (package_id, created) = tx.ensure_package(&u.package_name)?;
        s.packages_created += created as usize;

        if let Some((digest, metadata)) = &u.metadata {
            s.metadata_updated += tx.set_package_metadata(package_id, digest, metadata)? as usize;
        }
        if u.package_undeleted {
            s.packages_undeleted += tx.undelete_package(package_id)? as usize;
        }

        for nv in &u.new_versions {
            let (version_id, inserted) = tx.insert_version(package_id, &nv.row)?;
            s.versions_inserted += inserted as usize;
            s.dependencies_inserted += tx.insert_dependencies(version_id, &nv.dependencies)?;
            if let Some(old) = nv.supersedes {
                s.versions_superseded += tx.flag_version_superseded(old, now)? as usize;
            }
            if let (Some(url), Some(key)) = (&nv.row.tarball_url, &nv.row.blob_key) {
                let (_, created) = queue::enqueue(tx.conn(), key, url, Some(version_id), now)?;
                s.jobs_enqueued += created as usize;
            }
        }

        for version in &u.removed_versions {
            let id: Option<i64> = tx
                .conn()
                .query_row(
                    "SELECT id FROM versions WHERE package_id = ?1 AND version = ?2 AND superseded = 0",
                    params![package_id, version],
                    |r| r.get(0),
                )
                .optional()?;
            if let Some(id) = id {
                s.versions_flagged_deleted += tx.flag_version_deleted(id, now)? as usize;
            }
        }

        if u.package_deleted {
            s.packages_flagged_deleted += tx.flag_package_deleted(package_id, now)? as usize;
        }
        tx.set_package_seq(package_id, u.seq.as_str())?;
    }

    tx.set_cursor(feed_id, u.seq.as_str())?;
    Ok(s)
}

/// Quarantines a whole event whose document could not be interpreted.
pub fn dead_letter_event(
    tx: &StoreTx<'_>,
    feed_id: &str,
    event: &ChangeEvent,
    error: &str,
    now: &Timestamp,
) -> Result<ApplySummary> {
    let raw = json!({ "seq": event.seq, "id": event.package_name, "deleted": event.deleted, "doc": event.doc });
    let n = dead_letter_once(tx, feed_id, &event.seq, Some(&event.package_name), &raw.to_string(), error, now)?;
    tx.set_cursor(feed_id, event.seq.as_str())?;
    Ok(ApplySummary { dead_letters: n, ..Default::default() })
}

fn dead_letter_once(
    tx: &StoreTx<'_>,
    feed_id: &str,
    seq: &SeqToken,
    package: Option<&str>,
    raw: &str,
    error: &str,
    now: &Timestamp,
) -> Result<usize> {
    let seen: bool = tx.conn().query_row(
        "SELECT EXISTS (SELECT 1 FROM dead_letters WHERE feed_id = ?1 AND package_name IS ?2 AND raw = ?3)",
        params![feed_id, package, raw],
        |r| r.get(0),
    )?;
    if seen {
        return Ok(0);
    }
    tx.record_dead_letter(feed_id, seq.as_str(), package, raw, error, now)?;
    Ok(1)
}
