use std::path::Path;
use std::sync::Arc;

use registry_follower::blob::{BlobKey, BlobManager, BlobWorker, ManagerConfig};
use registry_follower::clock::SystemClock;
use serde_json::Value;

fn follower(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let mut argv = vec!["follower", "--log-level", "error"];
    argv.extend_from_slice(args);
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = registry_follower::cli::run_with_env(argv, &env, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

fn error_line(err: &str) -> Value {
    let line = err.lines().rev().find(|l| l.contains("\"error\"")).expect("an error line");
    serde_json::from_str(line).unwrap()
}

fn store_with_blob(root: &Path, key: &str, bytes: &[u8]) {
    let manager = Arc::new(BlobManager::open(root, ManagerConfig::default(), Arc::new(SystemClock)).unwrap());
    BlobWorker::new(manager, root).put(&BlobKey::new(key), bytes).unwrap();
}

#[test]
fn help_lists_every_subcommand() {
    let (code, out, _) = follower(&["--help"], &[]);
    assert_eq!(code, 0);
    for sub in [
        "ingest",
        "manager",
        "workers",
        "sweep-metrics",
        "sync-advisories",
        "analyze",
        "blob",
        "latency-report",
        "serve-scenario",
        "replay",
    ] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
    let (code, out, _) = follower(&["analyze", "impact", "--help"], &[]);
    assert_eq!(code, 0);
    assert!(out.contains("--min-downloads") && out.contains("--require-tests") && out.contains("--out"));
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, err) = follower(&["ingest", "--bogus"], &[]);
    assert_eq!(code, 1);
    assert_eq!(error_line(&err)["error"], "usage");
    let (code, _, _) = follower(&["frobnicate"], &[]);
    assert_eq!(code, 1);
}

#[test]
fn missing_required_field_is_named() {
    let (code, _, err) = follower(&["analyze", "deps"], &[]);
    assert_eq!(code, 1);
    let e = error_line(&err);
    assert_eq!(e["error"], "config-invalid");
    assert_eq!(e["field"], "store.path");
}

#[test]
fn env_overrides_are_typed_and_checked() {
    let (code, _, err) = follower(&["latency-report"], &[("FOLLOWER_WORKERS_COUNT", "many")]);
    assert_eq!(code, 1);
    assert_eq!(error_line(&err)["field"], "workers.count");

    let (code, _, err) = follower(&["latency-report"], &[("FOLLOWER_NOPE_X", "1")]);
    assert_eq!(code, 1);
    assert_eq!(error_line(&err)["error"], "config-invalid");

    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("m.db");
    let (code, _, err) = follower(
        &["latency-report"],
        &[("FOLLOWER_STORE_PATH", db.to_str().unwrap()), ("FOLLOWER_LATENCY_SLA", "soon")],
    );
    assert_eq!(code, 1);
    assert_eq!(error_line(&err)["field"], "latency.sla");
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("follower.toml");
    std::fs::write(&path, "[workers]\ncount = 2\nturbo = true\n").unwrap();
    let (code, _, err) = follower(&["--config", path.to_str().unwrap(), "latency-report"], &[]);
    assert_eq!(code, 1);
    let e = error_line(&err);
    assert_eq!(e["error"], "config-invalid");
    assert!(e["message"].as_str().unwrap().contains("turbo"), "{e}");
}

#[test]
fn config_file_and_env_combine() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("m.db");
    let path = dir.path().join("follower.toml");
    std::fs::write(&path, format!("[store]\npath = {:?}\n[latency]\nsla = \"2h\"\n", db)).unwrap();
    let (code, out, err) = follower(&["--config", path.to_str().unwrap(), "latency-report"], &[]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["sla_secs"], 7200.0);
    let (code, out, _) = follower(&["latency-report"], &[("FOLLOWER_CONFIG", path.to_str().unwrap()), ("FOLLOWER_LATENCY_SLA", "90s")]);
    assert_eq!(code, 0);
    assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["sla_secs"], 90.0);
}

#[test]
fn blob_cp_round_trips_and_reports_missing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("blobs");
    std::fs::create_dir_all(&root).unwrap();
    let bytes: Vec<u8> = (0..5000u32).map(|i| (i * 31 % 251) as u8).collect();
    store_with_blob(&root, "lib@1.0.0#abc", &bytes);
    let env = [("FOLLOWER_BLOB_ROOT", root.to_str().unwrap())];

    let dest = dir.path().join("out.tgz");
    let (code, _, err) = follower(&["blob", "cp", "lib@1.0.0#abc", dest.to_str().unwrap()], &env);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read(&dest).unwrap(), bytes);

    let (code, _, err) = follower(&["blob", "cp", "lib@9.9.9#abc", dir.path().join("x").to_str().unwrap()], &env);
    assert_eq!(code, 2);
    assert_eq!(error_line(&err)["error"], "not-found");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn blob_stats_reports_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("blobs");
    std::fs::create_dir_all(&root).unwrap();
    let manager = Arc::new(BlobManager::open(&root, ManagerConfig::default(), Arc::new(SystemClock)).unwrap());
    let blobs = BlobWorker::new(manager, &root);
    for (i, n) in [10usize, 20, 30, 40].iter().enumerate() {
        blobs.put(&BlobKey::new(format!("k{i}")), &vec![1; *n]).unwrap();
    }
    drop(blobs);
    let (code, out, err) = follower(&["blob", "stats", "--threshold", "25"], &[("FOLLOWER_BLOB_ROOT", root.to_str().unwrap())]);
    assert_eq!(code, 0, "{err}");
    let s: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(s["count"], 4);
    assert_eq!(s["median"], 25.0);
    assert_eq!(s["threshold"]["retained_bytes"], 30);
    assert_eq!(s["threshold"]["byte_fraction"], 0.3);
}

#[test]
fn replay_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios/retention.json");
    let (code, out, err) = follower(&["replay", scenario.to_str().unwrap(), "--work-dir", dir.path().to_str().unwrap()], &[]);
    assert_eq!(code, 0, "{err}");
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["diffs"], serde_json::json!([]));

    let db = dir.path().join("metadata.db");
    let env = [("FOLLOWER_STORE_PATH", db.to_str().unwrap())];
    let csv_path = dir.path().join("updates.csv");
    let (code, _, err) = follower(&["analyze", "updates", "--out", csv_path.to_str().unwrap()], &env);
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["package", "from_version", "to_version", "kind", "out_of_order", "published_at"]
    );
    assert!(rdr.records().count() >= 1);

    let (code, out, _) = follower(&["analyze", "deps"], &env);
    assert_eq!(code, 0);
    assert!(out.lines().next().is_some());
}

#[test]
fn bad_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, r#"{"events":[{"op":"delete_package","package":"ghost"}]}"#).unwrap();
    let (code, _, err) = follower(&["replay", path.to_str().unwrap()], &[]);
    assert_ne!(code, 0);
    assert_eq!(error_line(&err)["error"], "scenario-invalid");
}
