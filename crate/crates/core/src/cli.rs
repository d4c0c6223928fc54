//! The `follower` command suite. Exit codes: 0 ok, 1 usage or config
//! error, 2 runtime failure. Failures also print one JSON line
//! `{"error": <kind>, "message": ..}` on stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analyses::{self, AsOfPolicy, ImpactOptions, UpdateOptions};
use crate::blob::{read_blob, BlobKey, BlobManager, IndexSnapshot, ManagerApi, ManagerServer, RemoteManager};
use crate::changes::{HttpChangesFeed, Ingestor, SeqToken};
use crate::clock::{parse_duration, parse_ts, SharedClock, SystemClock};
use crate::config::{Config, ConfigError, LogFormat, ENV_CONFIG_PATH};
use crate::pipeline::{self, HttpFetcher, Queue, Worker};
use crate::replay::{self, MockRegistry, Scenario};
use crate::scrapers::{self, AdvisorySource, DirSource, HttpAdvisorySource, HttpMetricsClient, MetricsSweeper};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "follower", version, about = "Follow a package registry into a metadata store and tarball archive")]
struct Cli {
    /// Config file (TOML). Defaults to $FOLLOWER_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    log_format: Option<LogFormat>,
    /// trace, debug, info, warn or error.
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Follow the changes feed into the metadata store.
    Ingest {
        /// Drain the feed to its current end and exit.
        #[arg(long)]
        once: bool,
        /// Cursor to start from when the store has none.
        #[arg(long, value_name = "SEQ")]
        since: Option<String>,
    },
    /// Run the blob-store manager.
    Manager {
        #[arg(long, value_name = "ADDR")]
        listen: Option<String>,
    },
    /// Run download workers.
    Workers {
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Work off every job that is ready now and exit.
        #[arg(long)]
        once: bool,
    },
    /// Fetch last week's download counts for every package.
    SweepMetrics {
        /// Keep running and sweep again each new week.
        #[arg(long)]
        daemon: bool,
    },
    /// Pull new and changed security advisories.
    SyncAdvisories,
    /// Run an analysis and write its table as CSV.
    Analyze {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Read the tarball archive.
    Blob {
        #[command(subcommand)]
        command: BlobCommand,
    },
    /// Download latency summary against an SLA.
    LatencyReport {
        /// e.g. 24h, 90m, 3600.
        #[arg(long, value_name = "DURATION")]
        sla: Option<String>,
    },
    /// Serve a scenario file as a mock registry on the wall clock.
    ServeScenario {
        file: PathBuf,
        #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:0")]
        listen: String,
        /// RFC 3339 time the script starts at. Defaults to now.
        #[arg(long, value_name = "TIME")]
        start: Option<String>,
        /// Stop after this long instead of waiting for a signal.
        #[arg(long = "for", value_name = "DURATION")]
        run_for: Option<String>,
    },
    /// Run a scenario through the whole pipeline on a simulated clock and
    /// compare the result with the scenario's expected state.
    Replay {
        file: PathBuf,
        /// Keep the store and archive here instead of a temporary directory.
        #[arg(long, value_name = "DIR")]
        work_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Output {
    /// Write CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AsOf {
    /// Each client version's publish time.
    Client,
    /// The current time.
    Latest,
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Direct runtime dependency edges between version and package.
    Deps {
        #[command(flatten)]
        output: Output,
    },
    /// Resolve every runtime constraint to a concrete version.
    Resolve {
        #[arg(long, value_enum, default_value = "client")]
        as_of: AsOf,
        #[command(flatten)]
        output: Output,
    },
    /// Version-to-version updates with their semver kind.
    Updates {
        #[arg(long)]
        include_prerelease: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Versions covered by an advisory.
    Vulnerable {
        #[command(flatten)]
        output: Output,
    },
    /// Client versions that directly depend on a popular vulnerable package.
    Impact {
        /// Latest weekly download count must exceed N (0 disables).
        #[arg(long, value_name = "N", default_value_t = 0)]
        min_downloads: u64,
        /// Only clients whose manifest has scripts.test.
        #[arg(long)]
        require_tests: bool,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Subcommand)]
enum BlobCommand {
    /// Copy one stored blob to a file.
    Cp { key: String, dest: PathBuf },
    /// Size statistics, optionally with what a size cap would retain.
    Stats {
        #[arg(long, value_name = "BYTES")]
        threshold: Option<u64>,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    kind: String,
    message: String,
    field: Option<String>,
}

impl Failure {
    fn runtime(kind: &str, message: impl ToString) -> Self {
        Failure { code: 2, kind: kind.into(), message: message.to_string(), field: None }
    }

    fn usage(message: impl ToString) -> Self {
        Failure { code: 1, kind: "usage".into(), message: message.to_string(), field: None }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 1, kind: e.kind().into(), message: e.to_string(), field: e.field().map(str::to_string) }
    }
}

macro_rules! module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::runtime(e.kind(), e)
            }
        }
    )*};
}

module_error!(
    crate::store::StoreError,
    crate::blob::BlobError,
    crate::changes::IngestError,
    crate::scrapers::AdvisoryError,
    crate::replay::ReplayError,
    crate::replay::ScenarioError
);

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime("io-error", e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::runtime("io-error", e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// Set by SIGINT or SIGTERM. Daemons poll it and exit cleanly, leaving
/// cursors and leases for the next start.
pub fn stop_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        for signal in [libc::SIGINT, libc::SIGTERM] {
            let f = flag.clone();
            // The handler only stores to an atomic, which is async-signal-safe.
            let registered = unsafe { signal_hook_registry::register(signal, move || f.store(true, Ordering::SeqCst)) };
            if let Err(e) = registered {
                tracing::warn!(signal, error = %e, "cannot install signal handler");
            }
        }
        flag
    })
    .clone()
}

/// Runs the command line `args` (program name first) with the process
/// environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env: Vec<(String, String)> = std::env::vars().collect();
    run_with_env(args, &env, out, err)
}

/// As [`run`], reading configuration overrides from `env` only.
pub fn run_with_env<I, T>(args: I, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
                _ => report(err, &Failure::usage(e.render().to_string().trim_end())),
            };
        }
    };
    match execute(cli, env, out) {
        Ok(()) => 0,
        Err(f) => report(err, &f),
    }
}

fn report(err: &mut dyn Write, f: &Failure) -> i32 {
    let mut line = json!({"error": f.kind, "message": f.message});
    if let Some(field) = &f.field {
        line["field"] = Value::from(field.clone());
    }
    let _ = writeln!(err, "{line}");
    f.code
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Failure::runtime("io-error", e))?;
    writeln!(out)?;
    Ok(())
}

fn load_config(cli: &Cli, env: &[(String, String)]) -> Result<Config> {
    let path = cli
        .config
        .clone()
        .or_else(|| env.iter().find(|(k, _)| k == ENV_CONFIG_PATH).map(|(_, v)| PathBuf::from(v)));
    let mut config = Config::load(path.as_deref(), env)?;
    if let Some(f) = cli.log_format {
        config.log.format = f;
    }
    if let Some(l) = &cli.log_level {
        config.log.level = l.clone();
    }
    config.validate()?;
    Ok(config)
}

fn open_store(config: &Config) -> Result<Arc<Store>> {
    Ok(Arc::new(Store::open(config.store_path()?)?))
}

fn clock() -> SharedClock {
    Arc::new(SystemClock)
}

fn execute(cli: Cli, env: &[(String, String)], out: &mut dyn Write) -> Result<()> {
    let config = load_config(&cli, env)?;
    let level = config.log.level.parse().map_err(|_| Failure::usage("bad log level"))?;
    crate::logging::init(config.log.format, level);
    match cli.command {
        Command::Ingest { once, since } => ingest(&config, once, since, out),
        Command::Manager { listen } => manager(&config, listen, out),
        Command::Workers { count, once } => workers(&config, count, once, out),
        Command::SweepMetrics { daemon } => sweep_metrics(&config, daemon, out),
        Command::SyncAdvisories => sync_advisories(&config, out),
        Command::Analyze { analysis } => analyze(&config, analysis, out),
        Command::Blob { command: BlobCommand::Cp { key, dest } } => blob_cp(&config, &key, &dest, out),
        Command::Blob { command: BlobCommand::Stats { threshold } } => {
            let snapshot = IndexSnapshot::load(config.blob_root()?)?;
            emit(out, &snapshot.stats(threshold))
        }
        Command::LatencyReport { sla } => latency_report(&config, sla, out),
        Command::ServeScenario { file, listen, start, run_for } => serve_scenario(&file, &listen, start, run_for, out),
        Command::Replay { file, work_dir } => replay_file(&file, work_dir, out),
    }
}

fn ingest(config: &Config, once: bool, since: Option<String>, out: &mut dyn Write) -> Result<()> {
    let store = open_store(config)?;
    let feed = Arc::new(HttpChangesFeed::new(config.feed_id()?, config.feed_url()?));
    let start = SeqToken(since.unwrap_or_else(|| config.feed.start.clone()));
    let ingestor = Ingestor::new(store, feed, clock()).with_page_size(config.feed.page_size).with_start(start);
    let report = if once {
        ingestor.drain()?
    } else {
        ingestor.run(&stop_flag(), Duration::from_secs(config.feed.poll_interval_secs))?
    };
    emit(out, &report)
}

fn manager(config: &Config, listen: Option<String>, out: &mut dyn Write) -> Result<()> {
    let manager = Arc::new(BlobManager::open(config.blob_root()?, config.manager_config(), clock())?);
    let listen = listen.unwrap_or_else(|| config.blob.listen.clone());
    let mut server = ManagerServer::start(listen.as_str(), manager)?;
    emit(out, &json!({"listening": server.addr().to_string()}))?;
    out.flush()?;
    let stop = stop_flag();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(200));
    }
    server.shutdown();
    Ok(())
}

fn blob_manager(config: &Config) -> Result<Arc<dyn ManagerApi>> {
    Ok(match &config.blob.manager_addr {
        Some(addr) => Arc::new(RemoteManager::new(addr.clone())),
        None => Arc::new(BlobManager::open(config.blob_root()?, config.manager_config(), clock())?),
    })
}

fn workers(config: &Config, count: Option<usize>, once: bool, out: &mut dyn Write) -> Result<()> {
    let count = count.unwrap_or(config.workers.count);
    if count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let store = open_store(config)?;
    let root = config.blob_root()?.to_path_buf();
    let manager = blob_manager(config)?;
    let queue = Queue::new(store, clock(), config.queue_config());
    let fetcher = Arc::new(HttpFetcher::new(Duration::from_secs(config.workers.fetch_timeout_secs)));
    let report = if once {
        let mut total = pipeline::DrainReport::default();
        let handles: Vec<_> = (0..count)
            .map(|i| {
                let blobs = crate::blob::BlobWorker::new(manager.clone(), root.clone()).with_fsync(config.blob.fsync);
                let worker = Worker::new(format!("once-{}-{i}", std::process::id()), queue.clone(), fetcher.clone(), blobs);
                std::thread::spawn(move || worker.drain())
            })
            .collect();
        for h in handles {
            let r = h.join().map_err(|_| Failure::runtime("internal", "worker thread panicked"))??;
            total.add(&r);
        }
        total
    } else {
        let idle = Duration::from_secs(config.workers.idle_secs);
        pipeline::run_pool(count, queue, fetcher, manager, root, stop_flag(), idle)?
    };
    emit(out, &report)
}

fn sweep_metrics(config: &Config, daemon: bool, out: &mut dyn Write) -> Result<()> {
    let store = open_store(config)?;
    let client = HttpMetricsClient::new(config.metrics_url()?);
    let budget = config.sweep_config().budget;
    budget.validate().map_err(|m| ConfigError::Invalid { field: "metrics".into(), message: m })?;
    let stop = stop_flag();
    let stopped = || stop.load(Ordering::SeqCst);
    loop {
        let mut sweeper = MetricsSweeper::new(&store, &client, clock(), config.sweep_config());
        let report = sweeper.run(&stopped)?;
        emit(out, &report)?;
        out.flush()?;
        if !daemon {
            return Ok(());
        }
        let week = scrapers::metrics::last_complete_week(&chrono::Utc::now());
        while !stopped() && scrapers::metrics::last_complete_week(&chrono::Utc::now()) == week {
            std::thread::sleep(Duration::from_secs(1));
        }
        if stopped() {
            return Ok(());
        }
    }
}

fn sync_advisories(config: &Config, out: &mut dyn Write) -> Result<()> {
    let store = open_store(config)?;
    let source: Box<dyn AdvisorySource> = match (&config.advisories.dir, &config.advisories.url) {
        (Some(dir), _) => Box::new(DirSource::new(dir.clone())),
        (None, Some(url)) => Box::new(HttpAdvisorySource::new(url.clone())),
        (None, None) => return Err(ConfigError::Missing("advisories.dir").into()),
    };
    emit(out, &scrapers::sync_advisories(&store, source.as_ref())?)
}

const DEPS_CSV: &str = "\
SELECT cp.name AS client_package, cv.version AS client_version, e.v AS client_version_id,
       dp.name AS depends_on, d.constraint_raw AS constraint_raw
FROM metadata_analysis.version_direct_runtime_deps e
JOIN versions cv ON cv.id = e.v
JOIN packages cp ON cp.id = cv.package_id
JOIN packages dp ON dp.id = e.depends_on_pkg
JOIN dependencies d ON d.id = e.dependency_id
ORDER BY cp.name, cv.version_key, cv.id, dp.name";

const RESOLVE_CSV: &str = "\
SELECT cp.name AS client_package, cv.version AS client_version, dp.name AS depends_on,
       r.constraint_dnf, rv.version AS resolved_version, r.resolved_version_id, r.resolved_as_of
FROM metadata_analysis.resolved_runtime_deps r
JOIN versions cv ON cv.id = r.v
JOIN packages cp ON cp.id = cv.package_id
JOIN packages dp ON dp.id = r.depends_on_pkg
LEFT JOIN versions rv ON rv.id = r.resolved_version_id
ORDER BY cp.name, cv.version_key, cv.id, dp.name";

const UPDATES_CSV: &str = "\
SELECT p.name AS package, fv.version AS from_version, tv.version AS to_version, u.kind, u.out_of_order,
       tv.published_at AS published_at
FROM metadata_analysis.updates u
JOIN packages p ON p.id = u.package_id
JOIN versions fv ON fv.id = u.from_version_id
JOIN versions tv ON tv.id = u.to_version_id
ORDER BY p.name, tv.published_at, tv.version_key";

const VULNERABLE_CSV: &str = "\
SELECT p.name AS package, v.version, vv.advisory_id, vuln.severity
FROM metadata_analysis.vulnerable_versions vv
JOIN versions v ON v.id = vv.version_id
JOIN packages p ON p.id = v.package_id
JOIN vulnerabilities vuln ON vuln.advisory_id = vv.advisory_id
ORDER BY p.name, v.version_key, v.id, vv.advisory_id";

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn write_csv(output: &Output, header: &[String], rows: impl Iterator<Item = Vec<String>>, out: &mut dyn Write) -> Result<()> {
    let sink: Box<dyn Write + '_> = match &output.out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(&mut *out),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_query(store: &Store, sql: &str, output: &Output, out: &mut dyn Write) -> Result<usize> {
    let result = store.query(sql, &[])?;
    let n = result.rows.len();
    write_csv(output, &result.columns, result.rows.iter().map(|r| r.iter().map(csv_cell).collect()), out)?;
    Ok(n)
}

fn analyze(config: &Config, analysis: Analysis, out: &mut dyn Write) -> Result<()> {
    let store = open_store(config)?;
    let (rows, output, summary) = match analysis {
        Analysis::Deps { output } => {
            let report = analyses::materialize_direct_runtime_deps(&store)?;
            (write_query(&store, DEPS_CSV, &output, out)?, output, serde_json::to_value(report))
        }
        Analysis::Resolve { as_of, output } => {
            analyses::materialize_direct_runtime_deps(&store)?;
            let policy = match as_of {
                AsOf::Client => AsOfPolicy::ClientPublished,
                AsOf::Latest => AsOfPolicy::At(chrono::Utc::now()),
            };
            let (_, report) = analyses::resolve_edges(&store, policy)?;
            (write_query(&store, RESOLVE_CSV, &output, out)?, output, serde_json::to_value(report))
        }
        Analysis::Updates { include_prerelease, output } => {
            let updates = analyses::compute_updates(&store, UpdateOptions { include_prerelease })?;
            (write_query(&store, UPDATES_CSV, &output, out)?, output, Ok(json!({"updates": updates.len()})))
        }
        Analysis::Vulnerable { output } => {
            let (_, report) = analyses::vulnerable_versions(&store)?;
            (write_query(&store, VULNERABLE_CSV, &output, out)?, output, serde_json::to_value(report))
        }
        Analysis::Impact { min_downloads, require_tests, output } => {
            analyses::materialize_direct_runtime_deps(&store)?;
            let opts = ImpactOptions { min_weekly_downloads: min_downloads, require_test_script: require_tests };
            let candidates = analyses::impact_candidates(&store, &opts)?;
            let header: Vec<String> =
                ["client_package", "client_version", "client_version_id", "vulnerable_package", "blob_key", "tarball_url"]
                    .map(String::from)
                    .to_vec();
            let rows = candidates.iter().map(|c| {
                vec![
                    c.client_package.clone(),
                    c.client_version.clone(),
                    c.client_version_id.to_string(),
                    c.vulnerable_package.clone(),
                    c.blob_key.clone().unwrap_or_default(),
                    c.tarball_url.clone().unwrap_or_default(),
                ]
            });
            write_csv(&output, &header, rows, out)?;
            (candidates.len(), output, Ok(json!({"candidates": candidates.len()})))
        }
    };
    let summary = summary.map_err(|e| Failure::runtime("internal", e))?;
    tracing::info!(rows, summary = %summary, "analysis written");
    if let Some(path) = &output.out {
        emit(out, &json!({"rows": rows, "out": path, "summary": summary}))?;
    }
    Ok(())
}

fn blob_cp(config: &Config, key: &str, dest: &Path, out: &mut dyn Write) -> Result<()> {
    let root = config.blob_root()?;
    let key = BlobKey::new(key);
    let location = IndexSnapshot::load(root)?.lookup(&key)?;
    let bytes = read_blob(root, &location)?;
    std::fs::write(dest, &bytes)?;
    emit(out, &json!({"key": key.as_str(), "dest": dest, "bytes": bytes.len(), "sha256": location.checksum}))
}

fn latency_report(config: &Config, sla: Option<String>, out: &mut dyn Write) -> Result<()> {
    let sla = match sla {
        Some(s) => parse_duration(&s).filter(|d| !d.is_zero()).ok_or_else(|| Failure::usage(format!("bad --sla {s:?}")))?,
        None => config.sla()?,
    };
    let store = open_store(config)?;
    match pipeline::latency_report(&store, sla)? {
        Some(r) => emit(out, &r),
        None => emit(out, &json!({"completed": 0, "sla_secs": sla.as_secs_f64()})),
    }
}

fn serve_scenario(
    file: &Path,
    listen: &str,
    start: Option<String>,
    run_for: Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    let start = match start {
        Some(s) => parse_ts(&s).ok_or_else(|| Failure::usage(format!("bad --start {s:?}")))?,
        None => chrono::Utc::now(),
    };
    let deadline = match run_for {
        Some(s) => Some(
            Instant::now() + parse_duration(&s).ok_or_else(|| Failure::usage(format!("bad --for {s:?}")))?,
        ),
        None => None,
    };
    let timeline = Scenario::load(file)?.validate()?.rebased(start);
    let mut mock = MockRegistry::start_on(listen, &timeline, clock())?;
    emit(
        out,
        &json!({"base_url": mock.base_url(), "feed_url": mock.feed_url(), "start": crate::clock::format_ts(&start)}),
    )?;
    out.flush()?;
    let stop = stop_flag();
    while !stop.load(Ordering::SeqCst) && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let violations = mock.budget_violations();
    mock.shutdown();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime("budget-violation", violations.join("; ")))
    }
}

fn replay_file(file: &Path, work_dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let temp;
    let dir = match work_dir {
        Some(d) => d,
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let (timeline, outcome) = replay::run_file(file, &dir)?;
    let diffs = replay::compare(&outcome.store, &outcome.blobs, &replay::oracle(&timeline))?;
    emit(out, &json!({"scenario": timeline.name, "summary": outcome.summary, "diffs": diffs}))?;
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime("replay-mismatch", format!("{} differences from the expected state", diffs.len())))
    }
}
