//! Drives the command-line interface in-process: replays a scenario into a
//! work directory, then queries it with `analyze` and `latency-report`.

use registry_follower::cli;

fn follower(args: &[&str], env: &[(String, String)]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("follower").chain(args.iter().copied());
    let code = cli::run_with_env(argv, env, &mut out, &mut err);
    let text = String::from_utf8_lossy(if code == 0 { &out } else { &err }).into_owned();
    (code, text)
}

fn main() {
    let manifest = env!("CARGO_MANIFEST_DIR");
    let work = tempfile::tempdir().unwrap();
    let scenario = format!("{manifest}/fixtures/scenarios/retention.json");
    let work_dir = work.path().to_str().unwrap();

    let (code, text) = follower(&["--log-level", "error", "replay", &scenario, "--work-dir", work_dir], &[]);
    println!("replay -> {code}\n{text}");

    let env = vec![
        ("FOLLOWER_STORE_PATH".to_string(), work.path().join("metadata.db").display().to_string()),
        ("FOLLOWER_BLOB_ROOT".to_string(), work.path().join("blobs").display().to_string()),
    ];
    for args in [&["analyze", "updates"][..], &["latency-report", "--sla", "1h"], &["blob", "stats", "--threshold", "64"]] {
        let (code, text) = follower(args, &env);
        println!("{} -> {code}\n{text}", args.join(" "));
    }

    let (code, text) = follower(&["workers", "--count", "0"], &env);
    println!("workers --count 0 -> {code}: {text}");
}
