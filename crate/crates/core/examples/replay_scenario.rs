//! Replays a scenario file (default: the bundled fault scenario) and
//! prints the run summary and any difference from the expected state.

use std::path::PathBuf;

use registry_follower::replay::{compare, oracle, run_file};

fn main() {
    let path = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios/faults.json")
    });
    let dir = tempfile::tempdir().unwrap();
    let (timeline, outcome) = run_file(&path, dir.path()).unwrap();
    println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap());

    let diffs = compare(&outcome.store, &outcome.blobs, &oracle(&timeline)).unwrap();
    if diffs.is_empty() {
        println!("store matches the expected state");
    }
    for d in diffs {
        println!("diff: {d}");
    }
}
