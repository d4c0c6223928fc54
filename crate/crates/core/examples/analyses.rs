//! Replays the bundled impact scenario, then runs the dependency,
//! update, vulnerability and impact analyses over the resulting store.

use registry_follower::analyses::{
    compute_updates, impact_candidates, materialize_direct_runtime_deps, resolve_edges, vulnerable_versions, AsOfPolicy,
    ImpactOptions, UpdateOptions,
};
use registry_follower::replay::run_file;

fn main() {
    let scenario = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios/impact.json");
    let dir = tempfile::tempdir().unwrap();
    let (_, outcome) = run_file(&scenario, dir.path()).unwrap();
    let store = &outcome.store;

    let deps = materialize_direct_runtime_deps(store).unwrap();
    println!("direct runtime deps: {deps:?}");

    let (edges, report) = resolve_edges(store, AsOfPolicy::ClientPublished).unwrap();
    println!("resolved {} edges: {report:?}", edges.len());

    let updates = compute_updates(store, UpdateOptions::default()).unwrap();
    for u in updates.iter().filter(|u| u.out_of_order) {
        println!("out-of-order update {} -> {}", u.from_version_id, u.to_version_id);
    }
    println!("{} updates", updates.len());

    let (vulnerable, vreport) = vulnerable_versions(store).unwrap();
    println!("{} vulnerable versions: {vreport:?}", vulnerable.len());

    let opts = ImpactOptions { min_weekly_downloads: 1_000_000, require_test_script: true };
    for c in impact_candidates(store, &opts).unwrap() {
        println!("{} {} depends on {}", c.client_package, c.client_version, c.vulnerable_package);
    }
}
