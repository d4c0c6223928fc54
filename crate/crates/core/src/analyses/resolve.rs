use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rusqlite::params;
use serde::Serialize;

use crate::clock::{format_ts, Timestamp};
use crate::semver::{ConstraintDnf, Version};
use crate::store::{Store, StoreError, VersionRecord};

/// Which point in time a dependency constraint is resolved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AsOfPolicy {
    /// The client version's own publish time.
    #[default]
    ClientPublished,
    /// One fixed instant for every edge, e.g. "now" for latest resolution.
    At(Timestamp),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedEdge {
    pub version_id: i64,
    pub depends_on_pkg: i64,
    pub dependency_id: i64,
    pub constraint: String,
    pub resolved_version_id: Option<i64>,
    pub resolved_as_of: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ResolveReport {
    pub edges: usize,
    pub resolved: usize,
    pub unresolved: usize,
    /// Edges whose constraint never parsed; not materialized.
    pub unparsed_constraints: usize,
}

struct Candidate {
    id: i64,
    version: Version,
    generation: i64,
    published_at: Timestamp,
    gone_at: Option<Timestamp>,
}

impl Candidate {
    fn live_at(&self, t: &Timestamp) -> bool {
        self.published_at <= *t && self.gone_at.is_none_or(|g| g > *t)
    }
}

/// Candidate versions of every package, indexed for as-of lookups.
pub struct Resolver {
    by_package: HashMap<i64, Vec<Candidate>>,
    published: HashMap<i64, Timestamp>,
    policy: AsOfPolicy,
}

impl Resolver {
    pub fn load(store: &Store, policy: AsOfPolicy) -> Result<Self, StoreError> {
        Ok(Self::from_versions(store.all_versions()?, policy))
    }

    pub fn from_versions(versions: Vec<VersionRecord>, policy: AsOfPolicy) -> Self {
        let mut by_package: HashMap<i64, Vec<Candidate>> = HashMap::new();
        let mut published = HashMap::new();
        for v in versions {
            published.insert(v.id, v.published_at);
            let gone_at = match (v.deleted_at, v.superseded_at) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            by_package.entry(v.package_id).or_default().push(Candidate {
                id: v.id,
                version: v.parsed,
                generation: v.generation,
                published_at: v.published_at,
                gone_at,
            });
        }
        Resolver { by_package, published, policy }
    }

    pub fn as_of(&self, client_version_id: i64) -> Option<Timestamp> {
        match self.policy {
            AsOfPolicy::ClientPublished => self.published.get(&client_version_id).copied(),
            AsOfPolicy::At(t) => Some(t),
        }
    }

    /// Greatest satisfying version of `package_id` live at `as_of`. Among
    /// generations of the same version the newest wins.
    pub fn resolve(&self, package_id: i64, constraint: &ConstraintDnf, as_of: &Timestamp) -> Option<i64> {
        self.by_package
            .get(&package_id)?
            .iter()
            .filter(|c| c.live_at(as_of) && constraint.satisfied_by(&c.version))
            .max_by(|a, b| a.version.cmp(&b.version).then(a.generation.cmp(&b.generation)))
            .map(|c| c.id)
    }
}

struct DirectEdge {
    v: i64,
    depends_on_pkg: i64,
    dependency_id: i64,
    constraint: Option<String>,
}

fn direct_edges(store: &Store) -> Result<Vec<DirectEdge>, StoreError> {
    store.with_conn(|c| {
        let mut stmt = c.prepare(
            "SELECT e.v, e.depends_on_pkg, e.dependency_id, d.constraint_dnf
             FROM metadata_analysis.version_direct_runtime_deps e
             JOIN dependencies d ON d.id = e.dependency_id
             ORDER BY e.v, e.depends_on_pkg",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok(DirectEdge { v: r.get(0)?, depends_on_pkg: r.get(1)?, dependency_id: r.get(2)?, constraint: r.get(3)? })
        })?;
        rows.collect()
    })
}

/// Rebuilds `metadata_analysis.resolved_runtime_deps` from the direct edges.
pub fn resolve_edges(store: &Store, policy: AsOfPolicy) -> Result<(Vec<ResolvedEdge>, ResolveReport), StoreError> {
    let resolver = Resolver::load(store, policy)?;
    let mut report = ResolveReport::default();
    let mut out = Vec::new();
    for e in direct_edges(store)? {
        let Some(raw) = e.constraint else {
            report.unparsed_constraints += 1;
            continue;
        };
        let dnf = ConstraintDnf::parse(&raw).map_err(|err| StoreError::Corrupt(err.to_string()))?;
        let as_of = resolver.as_of(e.v).ok_or_else(|| StoreError::Corrupt(format!("edge from unknown version {}", e.v)))?;
        let resolved = resolver.resolve(e.depends_on_pkg, &dnf, &as_of);
        report.edges += 1;
        if resolved.is_some() {
            report.resolved += 1;
        } else {
            report.unresolved += 1;
        }
        out.push(ResolvedEdge {
            version_id: e.v,
            depends_on_pkg: e.depends_on_pkg,
            dependency_id: e.dependency_id,
            constraint: raw,
            resolved_version_id: resolved,
            resolved_as_of: as_of,
        });
    }
    store.with_tx(|tx| {
        let c = tx.conn();
        c.execute("DELETE FROM metadata_analysis.resolved_runtime_deps", [])?;
        let mut stmt = c.prepare(
            "INSERT INTO metadata_analysis.resolved_runtime_deps
                 (v, depends_on_pkg, dependency_id, constraint_dnf, resolved_version_id, resolved_as_of)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        )?;
        for e in &out {
            stmt.execute(params![
                e.version_id,
                e.depends_on_pkg,
                e.dependency_id,
                e.constraint,
                e.resolved_version_id,
                format_ts(&e.resolved_as_of)
            ])?;
        }
        Ok::<_, StoreError>(())
    })?;
    Ok((out, report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<i64>,
    pub edges: BTreeSet<(i64, i64)>,
}

/// Breadth-first closure over the materialized resolved edges. Each node
/// is expanded once, so cycles terminate.
pub fn transitive_graph(store: &Store, roots: &[i64]) -> Result<DependencyGraph, StoreError> {
    let adjacency: BTreeMap<i64, Vec<i64>> = store.with_conn(|c| {
        let mut stmt = c.prepare(
            "SELECT v, resolved_version_id FROM metadata_analysis.resolved_runtime_deps
             WHERE resolved_version_id IS NOT NULL ORDER BY v, depends_on_pkg",
        )?;
        let mut adj: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        let rows = stmt.query_map([], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?)))?;
        for row in rows {
            let (v, to) = row?;
            adj.entry(v).or_default().push(to);
        }
        Ok(adj)
    })?;
    Ok(closure(roots, |v| adjacency.get(&v).cloned().unwrap_or_default()))
}

pub fn closure(roots: &[i64], mut next: impl FnMut(i64) -> Vec<i64>) -> DependencyGraph {
    let mut graph = DependencyGraph::default();
    let mut queue: VecDeque<i64> = VecDeque::new();
    for &r in roots {
        if graph.nodes.insert(r) {
            queue.push_back(r);
        }
    }
    while let Some(v) = queue.pop_front() {
        for to in next(v) {
            graph.edges.insert((v, to));
            if graph.nodes.insert(to) {
                queue.push_back(to);
            }
        }
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_shapes() {
        let chain = closure(&[1], |v| if v < 3 { vec![v + 1] } else { vec![] });
        assert_eq!((chain.nodes.len(), chain.edges.len()), (3, 2));
        let cycle = closure(&[1], |v| vec![if v == 1 { 2 } else { 1 }]);
        assert_eq!((cycle.nodes.len(), cycle.edges.len()), (2, 2));
        let single = closure(&[7], |_| vec![]);
        assert_eq!((single.nodes.len(), single.edges.len()), (1, 0));
    }
}
