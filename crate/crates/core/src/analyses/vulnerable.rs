use rusqlite::params;
use serde::Serialize;

use crate::store::{Store, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct VulnerableVersion {
    pub version_id: i64,
    pub advisory_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VulnerableReport {
    pub rows: usize,
    pub advisories: usize,
    pub withdrawn_skipped: usize,
    /// `(advisory_id, raw range)` pairs that never parsed.
    pub unparsed_ranges: Vec<(String, String)>,
    /// `(advisory_id, package name)` for packages the store has never seen.
    pub unknown_packages: Vec<(String, String)>,
}

/// Rebuilds `metadata_analysis.vulnerable_versions`: one row per version
/// row satisfying any parsed range of a non-withdrawn advisory.
pub fn vulnerable_versions(store: &Store) -> Result<(Vec<VulnerableVersion>, VulnerableReport), StoreError> {
    let mut report = VulnerableReport::default();
    let mut rows = Vec::new();
    for adv in store.advisories()? {
        report.advisories += 1;
        if adv.withdrawn {
            report.withdrawn_skipped += 1;
            continue;
        }
        for r in adv.ranges.iter().filter(|r| r.constraint.is_none()) {
            report.unparsed_ranges.push((adv.advisory_id.clone(), r.constraint_raw.clone()));
        }
        let Some(pkg) = store.package_by_name(&adv.package_name)? else {
            report.unknown_packages.push((adv.advisory_id.clone(), adv.package_name.clone()));
            continue;
        };
        for v in store.versions_of(pkg.id)? {
            let hit = adv
                .ranges
                .iter()
                .filter_map(|r| r.constraint.as_ref())
                .any(|c| c.satisfied_by(&v.parsed));
            if hit {
                rows.push(VulnerableVersion { version_id: v.id, advisory_id: adv.advisory_id.clone() });
            }
        }
    }
    rows.sort();
    report.rows = rows.len();
    store.with_tx(|tx| {
        let c = tx.conn();
        c.execute("DELETE FROM metadata_analysis.vulnerable_versions", [])?;
        let mut stmt =
            c.prepare("INSERT INTO metadata_analysis.vulnerable_versions (version_id, advisory_id) VALUES (?1, ?2)")?;
        for r in &rows {
            stmt.execute(params![r.version_id, r.advisory_id])?;
        }
        Ok::<_, StoreError>(())
    })?;
    Ok((rows, report))
}
