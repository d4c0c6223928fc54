use std::collections::BTreeMap;

use rusqlite::params;
use serde::Serialize;

use crate::semver::Version;
use crate::store::{Store, StoreError, VersionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Major,
    Minor,
    Patch,
    Prerelease,
}

impl UpdateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::Major => "major",
            UpdateKind::Minor => "minor",
            UpdateKind::Patch => "patch",
            UpdateKind::Prerelease => "prerelease",
        }
    }

    /// Highest changed core component; `Prerelease` when the cores match.
    pub fn between(from: &Version, to: &Version) -> UpdateKind {
        if from.major != to.major {
            UpdateKind::Major
        } else if from.minor != to.minor {
            UpdateKind::Minor
        } else if from.patch != to.patch {
            UpdateKind::Patch
        } else {
            UpdateKind::Prerelease
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UpdateRecord {
    pub package_id: i64,
    pub from_version_id: i64,
    pub to_version_id: i64,
    pub kind: UpdateKind,
    pub out_of_order: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateOptions {
    /// Also treat prerelease versions as update endpoints.
    pub include_prerelease: bool,
}

/// Updates within one package. For each eligible version `v` published at
/// `t`, the update source is the semver-greatest eligible version published
/// strictly before `t` that is semver-less than `v`. `out_of_order` marks a
/// `v` that some semver-greater version predates.
pub fn package_updates(versions: &[&VersionRecord], opts: UpdateOptions) -> Vec<UpdateRecord> {
    let eligible: Vec<&&VersionRecord> =
        versions.iter().filter(|v| opts.include_prerelease || !v.parsed.is_prerelease()).collect();
    let mut out = Vec::new();
    for to in &eligible {
        let earlier = eligible.iter().filter(|c| c.published_at < to.published_at);
        let from = earlier
            .clone()
            .filter(|c| c.parsed < to.parsed)
            .max_by(|a, b| a.parsed.cmp(&b.parsed).then(a.id.cmp(&b.id)));
        let Some(from) = from else { continue };
        out.push(UpdateRecord {
            package_id: to.package_id,
            from_version_id: from.id,
            to_version_id: to.id,
            kind: UpdateKind::between(&from.parsed, &to.parsed),
            out_of_order: earlier.clone().any(|c| c.parsed > to.parsed),
        });
    }
    out.sort_by_key(|u| (u.from_version_id, u.to_version_id));
    out
}

/// Rebuilds `metadata_analysis.updates` over current (non-superseded)
/// version rows. Deleted versions still count: they were published.
pub fn compute_updates(store: &Store, opts: UpdateOptions) -> Result<Vec<UpdateRecord>, StoreError> {
    let versions = store.all_versions()?;
    let mut by_package: BTreeMap<i64, Vec<&VersionRecord>> = BTreeMap::new();
    for v in versions.iter().filter(|v| !v.superseded) {
        by_package.entry(v.package_id).or_default().push(v);
    }
    let updates: Vec<UpdateRecord> =
        by_package.values().flat_map(|vs| package_updates(vs, opts)).collect();
    store.with_tx(|tx| {
        let c = tx.conn();
        c.execute("DELETE FROM metadata_analysis.updates", [])?;
        let mut stmt = c.prepare(
            "INSERT INTO metadata_analysis.updates (package_id, from_version_id, to_version_id, kind, out_of_order)
             VALUES (?1, ?2, ?3, ?4, ?5)",
        )?;
        for u in &updates {
            stmt.execute(params![u.package_id, u.from_version_id, u.to_version_id, u.kind.as_str(), u.out_of_order])?;
        }
        Ok::<_, StoreError>(())
    })?;
    Ok(updates)
}
