//! Applies a short changes feed to an in-memory store and shows what was
//! recorded, including a version removed by a later change.

use std::sync::Arc;

use registry_follower::changes::{ChangeEvent, Ingestor, SeqToken, VecFeed};
use registry_follower::clock::{parse_ts, SimClock};
use registry_follower::store::Store;
use serde_json::{json, Value};

fn doc(versions: &[(&str, &str)]) -> Value {
    let mut vs = serde_json::Map::new();
    let mut time = serde_json::Map::new();
    for (v, t) in versions {
        vs.insert(
            v.to_string(),
            json!({
                "name": "left-pad",
                "version": v,
                "dependencies": {"tiny-utils": "^2.0.0"},
                "dist": {"tarball": format!("https://registry.example/left-pad/-/left-pad-{v}.tgz")}
            }),
        );
        time.insert(v.to_string(), json!(t));
    }
    json!({"_id": "left-pad", "name": "left-pad", "versions": vs, "time": time})
}

fn event(seq: u64, doc: Value) -> ChangeEvent {
    ChangeEvent { seq: SeqToken(seq.to_string()), package_name: "left-pad".into(), deleted: false, doc: Some(doc) }
}

fn main() {
    let store = Arc::new(Store::open_in_memory().unwrap());
    let clock = SimClock::shared(parse_ts("2024-04-01T00:00:00Z").unwrap());
    let feed = Arc::new(VecFeed::new(
        "example",
        vec![
            event(1, doc(&[("1.0.0", "2024-03-01T10:00:00Z")])),
            event(2, doc(&[("1.0.0", "2024-03-01T10:00:00Z"), ("1.1.0", "2024-03-05T09:30:00Z")])),
            event(3, doc(&[("1.1.0", "2024-03-05T09:30:00Z")])),
        ],
    ));

    let report = Ingestor::new(store.clone(), feed, clock).drain().unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());

    let pkg = store.package_by_name("left-pad").unwrap().unwrap();
    for v in store.versions_of(pkg.id).unwrap() {
        let deps: Vec<String> = store
            .dependencies_of(v.id)
            .unwrap()
            .iter()
            .map(|d| format!("{} {}", d.depends_on_name, d.constraint_raw))
            .collect();
        println!("{} deleted={} deps={deps:?}", v.version, v.deleted_at.is_some());
    }
    println!("cursor {:?}", store.cursor("example").unwrap());
}
