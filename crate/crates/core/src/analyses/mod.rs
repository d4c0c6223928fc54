//! Reusable analyses over the core tables. Each materialization rebuilds
//! one table in the `metadata_analysis` schema inside a single transaction.

mod resolve;
mod updates;
mod vulnerable;

use std::collections::BTreeMap;

use rusqlite::ToSql;
use serde::Serialize;

use crate::store::{Store, StoreError};

pub use resolve::{closure, resolve_edges, transitive_graph, AsOfPolicy, DependencyGraph, ResolveReport, ResolvedEdge, Resolver};
pub use updates::{compute_updates, package_updates, UpdateKind, UpdateOptions, UpdateRecord};
pub use vulnerable::{vulnerable_versions, VulnerableReport, VulnerableVersion};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DirectDepsReport {
    pub rows: usize,
    /// Runtime dependency names that match no known package, with the
    /// number of edges naming each.
    pub skipped_names: BTreeMap<String, usize>,
}

/// Rebuilds `metadata_analysis.version_direct_runtime_deps`: one row per
/// runtime dependency edge whose target name is a known package.
pub fn materialize_direct_runtime_deps(store: &Store) -> Result<DirectDepsReport, StoreError> {
    store.with_tx(|tx| {
        let c = tx.conn();
        c.execute("DELETE FROM metadata_analysis.version_direct_runtime_deps", [])?;
        let rows = c.execute(
            "INSERT INTO metadata_analysis.version_direct_runtime_deps (v, depends_on_pkg, dependency_id)
             SELECT d.version_id, p.id, d.id
             FROM dependencies d JOIN packages p ON p.name = d.depends_on_name
             WHERE d.kind = 'runtime'
             ORDER BY d.version_id, p.id",
            [],
        )?;
        let mut stmt = c.prepare(
            "SELECT d.depends_on_name, COUNT(*) FROM dependencies d
             LEFT JOIN packages p ON p.name = d.depends_on_name
             WHERE d.kind = 'runtime' AND p.id IS NULL
             GROUP BY d.depends_on_name ORDER BY d.depends_on_name",
        )?;
        let skipped = stmt
            .query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)? as usize)))?
            .collect::<rusqlite::Result<BTreeMap<_, _>>>()?;
        Ok::<_, StoreError>(DirectDepsReport { rows, skipped_names: skipped })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ImpactCandidate {
    pub vulnerable_package: String,
    pub client_package: String,
    pub client_version: String,
    pub client_version_id: i64,
    /// Object-store key of the client tarball, when it has one.
    pub blob_key: Option<String>,
    pub tarball_url: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImpactOptions {
    /// Latest weekly count must exceed this. Zero drops the metrics join.
    pub min_weekly_downloads: u64,
    pub require_test_script: bool,
}

const IMPACT_SELECT: &str = "\
SELECT DISTINCT vuln_p.name, client_p.name, client.version, client.id, client.blob_key, client.tarball_url
FROM packages vuln_p
JOIN vulnerabilities vuln ON vuln_p.name = vuln.package_name";

const IMPACT_METRICS: &str = "
JOIN download_metrics m ON m.package_id = vuln_p.id
  AND (m.download_counts ->> '$[#-1].counter') > ?1";

const IMPACT_CLIENTS: &str = "
JOIN metadata_analysis.version_direct_runtime_deps edge ON edge.depends_on_pkg = vuln_p.id
JOIN versions client ON client.id = edge.v
JOIN packages client_p ON client_p.id = client.package_id
WHERE vuln.withdrawn = 0";

const IMPACT_TESTS: &str = "
  AND client.extra_metadata -> 'scripts' -> 'test' IS NOT NULL";

pub fn impact_sql(opts: &ImpactOptions) -> String {
    let mut sql = String::from(IMPACT_SELECT);
    if opts.min_weekly_downloads > 0 {
        sql.push_str(IMPACT_METRICS);
    }
    sql.push_str(IMPACT_CLIENTS);
    if opts.require_test_script {
        sql.push_str(IMPACT_TESTS);
    }
    sql.push_str("\nORDER BY vuln_p.name, client_p.name, client.version_key, client.id");
    sql
}

/// Client versions that directly depend (at runtime) on a package with a
/// non-withdrawn advisory. Versions of the vulnerable package are not
/// distinguished; see [`vulnerable_versions`] for the version-precise view.
/// Requires [`materialize_direct_runtime_deps`] to have run.
pub fn impact_candidates(store: &Store, opts: &ImpactOptions) -> Result<Vec<ImpactCandidate>, StoreError> {
    let sql = impact_sql(opts);
    let threshold = opts.min_weekly_downloads as i64;
    store.with_conn(|c| {
        let mut stmt = c.prepare(&sql)?;
        let params: Vec<&dyn ToSql> = if opts.min_weekly_downloads > 0 { vec![&threshold] } else { vec![] };
        let rows = stmt.query_map(params.as_slice(), |r| {
            Ok(ImpactCandidate {
                vulnerable_package: r.get(0)?,
                client_package: r.get(1)?,
                client_version: r.get(2)?,
                client_version_id: r.get(3)?,
                blob_key: r.get(4)?,
                tarball_url: r.get(5)?,
            })
        })?;
        rows.collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{parse_ts, Timestamp};
    use crate::store::{AdvisoryRange, AdvisoryRecord, DepKind, DependencyRow, MetricPoint, VersionRow};
    use serde_json::json;

    fn t(s: &str) -> Timestamp {
        parse_ts(&format!("2024-01-{s}T00:00:00Z")).unwrap()
    }

    struct Seed<'a>(&'a Store);

    impl Seed<'_> {
        fn version(&self, pkg: &str, v: &str, day: &str, deps: &[(&str, &str, DepKind)]) -> i64 {
            self.version_with(pkg, v, day, deps, json!({}))
        }

        fn version_with(&self, pkg: &str, v: &str, day: &str, deps: &[(&str, &str, DepKind)], extra: serde_json::Value) -> i64 {
            self.0
                .with_tx(|tx| {
                    let (pid, _) = tx.ensure_package(pkg)?;
                    let mut row = VersionRow::new(v, t(day)).unwrap();
                    row.extra_metadata = extra;
                    let (id, _) = tx.insert_version(pid, &row)?;
                    let rows: Vec<_> = deps.iter().map(|(n, c, k)| DependencyRow::new(*n, *c, *k)).collect();
                    tx.insert_dependencies(id, &rows)?;
                    Ok::<_, StoreError>(id)
                })
                .unwrap()
        }
    }

    #[test]
    fn direct_deps_filter_kind_and_unknown() {
        let store = Store::open_in_memory().unwrap();
        let s = Seed(&store);
        s.version("lib", "1.0.0", "01", &[]);
        s.version("client", "1.0.0", "02", &[("lib", "^1", DepKind::Runtime), ("ghost", "*", DepKind::Runtime)]);
        s.version("tool", "1.0.0", "02", &[("lib", "^1", DepKind::Dev)]);
        let report = materialize_direct_runtime_deps(&store).unwrap();
        assert_eq!(report.rows, 1);
        assert_eq!(report.skipped_names, BTreeMap::from([("ghost".to_string(), 1)]));
    }

    #[test]
    fn resolution_respects_publish_time() {
        let store = Store::open_in_memory().unwrap();
        let s = Seed(&store);
        for (v, d) in [("12.0.0", "01"), ("13.0.1", "02"), ("13.0.5", "03"), ("13.1.0", "04"), ("13.0.9", "20")] {
            s.version("lib", v, d, &[]);
        }
        let client = s.version("client", "1.0.0", "10", &[("lib", "12 || ~13.0.1", DepKind::Runtime)]);
        materialize_direct_runtime_deps(&store).unwrap();
        let (edges, report) = resolve_edges(&store, AsOfPolicy::default()).unwrap();
        assert_eq!(report.resolved, 1);
        let resolved = store.version(edges[0].resolved_version_id.unwrap()).unwrap().unwrap();
        assert_eq!(resolved.version, "13.0.5");
        assert_eq!(edges[0].version_id, client);
        let (edges, _) = resolve_edges(&store, AsOfPolicy::At(t("25"))).unwrap();
        let resolved = store.version(edges[0].resolved_version_id.unwrap()).unwrap().unwrap();
        assert_eq!(resolved.version, "13.0.9");
    }

    #[test]
    fn backport_is_out_of_order() {
        let store = Store::open_in_memory().unwrap();
        let s = Seed(&store);
        let a = s.version("p", "1.0.0", "01", &[]);
        let b = s.version("p", "2.0.0", "02", &[]);
        let c = s.version("p", "1.0.1", "03", &[]);
        s.version("p", "2.1.0-beta.1", "04", &[]);
        let ups = compute_updates(&store, UpdateOptions::default()).unwrap();
        assert_eq!(
            ups,
            vec![
                UpdateRecord { package_id: 1, from_version_id: a, to_version_id: b, kind: UpdateKind::Major, out_of_order: false },
                UpdateRecord { package_id: 1, from_version_id: a, to_version_id: c, kind: UpdateKind::Patch, out_of_order: true },
            ]
        );
        let with_pre = compute_updates(&store, UpdateOptions { include_prerelease: true }).unwrap();
        assert_eq!(with_pre.len(), 3);
    }

    fn advisory(id: &str, pkg: &str, range: &str, withdrawn: bool) -> AdvisoryRecord {
        AdvisoryRecord {
            advisory_id: id.into(),
            package_name: pkg.into(),
            severity: None,
            cwes: vec![],
            withdrawn,
            modified: None,
            ranges: vec![AdvisoryRange::new(range)],
            raw: json!({}),
        }
    }

    #[test]
    fn vulnerable_versions_examples() {
        let store = Store::open_in_memory().unwrap();
        let s = Seed(&store);
        let v121 = s.version("p", "1.2.1", "01", &[]);
        s.version("p", "1.2.2", "02", &[]);
        store
            .with_tx(|tx| {
                tx.upsert_advisory(&advisory("A", "p", "<1.2.2", false))?;
                tx.upsert_advisory(&advisory("W", "p", "*", true))?;
                tx.upsert_advisory(&advisory("U", "nobody", "*", false))
            })
            .unwrap();
        let (rows, report) = vulnerable_versions(&store).unwrap();
        assert_eq!(rows, vec![VulnerableVersion { version_id: v121, advisory_id: "A".into() }]);
        assert_eq!(report.withdrawn_skipped, 1);
        assert_eq!(report.unknown_packages, vec![("U".to_string(), "nobody".to_string())]);
    }

    #[test]
    fn impact_filters() {
        let store = Store::open_in_memory().unwrap();
        let s = Seed(&store);
        s.version("hot", "1.0.0", "01", &[]);
        s.version("cold", "1.0.0", "01", &[]);
        let tests = json!({"scripts": {"test": "mocha"}});
        s.version_with("c1", "1.0.0", "02", &[("hot", "^1", DepKind::Runtime)], tests.clone());
        s.version("c2", "1.0.0", "02", &[("hot", "^1", DepKind::Runtime)]);
        s.version_with("c3", "1.0.0", "02", &[("cold", "^1", DepKind::Runtime)], tests);
        store
            .with_tx(|tx| {
                tx.upsert_advisory(&advisory("A", "hot", "*", false))?;
                tx.upsert_advisory(&advisory("B", "cold", "*", false))?;
                let week = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
                let hot = tx.known_package("hot")?.unwrap().id;
                let cold = tx.known_package("cold")?.unwrap().id;
                tx.append_metric_point(hot, MetricPoint { week_start: week, counter: 5_000_000 })?;
                tx.append_metric_point(cold, MetricPoint { week_start: week, counter: 10 })?;
                Ok::<_, StoreError>(())
            })
            .unwrap();
        materialize_direct_runtime_deps(&store).unwrap();
        let pick = |min, tests| -> Vec<String> {
            impact_candidates(&store, &ImpactOptions { min_weekly_downloads: min, require_test_script: tests })
                .unwrap()
                .into_iter()
                .map(|c| c.client_package)
                .collect()
        };
        assert_eq!(pick(1_000_000, true), vec!["c1"]);
        assert_eq!(pick(1_000_000, false), vec!["c1", "c2"]);
        assert_eq!(pick(0, false), vec!["c3", "c1", "c2"]);
    }
}
