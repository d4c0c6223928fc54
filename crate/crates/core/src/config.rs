//! Follower configuration: one TOML file plus `FOLLOWER_<SECTION>_<KEY>`
//! environment overrides. Format: `docs/config.md`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::blob::ManagerConfig;
use crate::clock::parse_duration;
use crate::pipeline::QueueConfig;
use crate::scrapers::{RateBudget, SweepConfig};

pub const ENV_PREFIX: &str = "FOLLOWER_";
/// Names the config file when `--config` is absent.
pub const ENV_CONFIG_PATH: &str = "FOLLOWER_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        "config-invalid"
    }

    /// Dotted name of the offending field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Missing(f) => Some(f),
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Read { .. } => None,
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub feed: FeedConfig,
    pub store: StoreConfig,
    pub blob: BlobConfig,
    pub workers: WorkersConfig,
    pub metrics: MetricsConfig,
    pub advisories: AdvisoriesConfig,
    pub latency: LatencyConfig,
    pub log: LogConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedConfig {
    /// Base URL of the registry database; `/_changes` is appended.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Key for the persisted cursor. Defaults to the URL.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Cursor used when the store has none yet.
    pub start: String,
    pub page_size: usize,
    pub poll_interval_secs: u64,
}

impl Default for FeedConfig {
    fn default() -> Self {
        FeedConfig { url: None, id: None, start: "0".into(), page_size: 100, poll_interval_secs: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// SQLite database file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub segment_size: u64,
    pub ticket_ttl_secs: u64,
    pub fsync: bool,
    /// Address `follower manager` listens on.
    pub listen: String,
    /// Manager that workers talk to. Without it, workers open the store
    /// themselves and must be the only writer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manager_addr: Option<String>,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            root: None,
            segment_size: crate::blob::DEFAULT_SEGMENT_SIZE,
            ticket_ttl_secs: 600,
            fsync: true,
            listen: "127.0.0.1:7070".into(),
            manager_addr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkersConfig {
    pub count: usize,
    pub lease_secs: u64,
    pub max_attempts: u32,
    pub backoff_base_secs: u64,
    pub backoff_cap_secs: u64,
    pub fetch_timeout_secs: u64,
    pub idle_secs: u64,
}

impl Default for WorkersConfig {
    fn default() -> Self {
        WorkersConfig {
            count: 4,
            lease_secs: 300,
            max_attempts: 8,
            backoff_base_secs: 2,
            backoff_cap_secs: 3600,
            fetch_timeout_secs: 600,
            idle_secs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub requests_per_interval: u32,
    pub interval_secs: u64,
    pub batch_size: usize,
    pub max_attempts: u32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let b = RateBudget::default();
        MetricsConfig {
            base_url: None,
            requests_per_interval: b.requests_per_interval,
            interval_secs: b.interval.as_secs(),
            batch_size: b.batch_size,
            max_attempts: SweepConfig::default().max_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvisoriesConfig {
    /// Directory of OSV JSON files. Takes precedence over `url`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// `90s`, `15m`, `24h`, `7d`, or plain seconds.
    pub sla: String,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig { sla: "24h".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    pub format: LogFormat,
    pub level: String,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { format: LogFormat::Json, level: "info".into() }
    }
}

const SECTIONS: [&str; 8] = ["feed", "store", "blob", "workers", "metrics", "advisories", "latency", "log"];

/// Turns `FOLLOWER_<SECTION>_<KEY>=value` into `section.key`. The value is
/// typed after the field's default, so numeric and boolean fields must
/// parse as such.
fn apply_env(table: &mut toml::Table, env: &[(String, String)]) -> Result<(), ConfigError> {
    let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
    for (name, value) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        if name == ENV_CONFIG_PATH {
            continue;
        }
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_').filter(|(s, _)| SECTIONS.contains(s)) else {
            return Err(ConfigError::invalid(name, "unknown configuration variable"));
        };
        let field = format!("{section}.{key}");
        let typed = match defaults.get(section).and_then(|s| s.get(key)) {
            Some(toml::Value::Integer(_)) => toml::Value::Integer(
                value.trim().parse().map_err(|_| ConfigError::invalid(&field, format!("{name}: expected an integer")))?,
            ),
            Some(toml::Value::Boolean(_)) => toml::Value::Boolean(
                value.trim().parse().map_err(|_| ConfigError::invalid(&field, format!("{name}: expected true or false")))?,
            ),
            _ => toml::Value::String(value.clone()),
        };
        let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.to_string(), typed);
            }
            _ => return Err(ConfigError::invalid(section, "expected a table")),
        }
    }
    Ok(())
}

impl Config {
    /// Parses TOML text, then applies overrides from `env` and validates.
    pub fn from_toml(text: &str, env: &[(String, String)]) -> Result<Config, ConfigError> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| ConfigError::invalid(&error_field(&e), e.message()))?;
        apply_env(&mut table, env)?;
        let config: Config =
            table.try_into().map_err(|e: toml::de::Error| ConfigError::invalid(&error_field(&e), e.message()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or nothing, for an all-defaults base) and applies `env`.
    pub fn load(path: Option<&Path>, env: &[(String, String)]) -> Result<Config, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Read { path: p.to_path_buf(), message: e.to_string() })?,
            None => String::new(),
        };
        Config::from_toml(&text, env)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, n: u64| {
            if n == 0 {
                Err(ConfigError::invalid(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("feed.page_size", self.feed.page_size as u64)?;
        positive("blob.segment_size", self.blob.segment_size)?;
        positive("blob.ticket_ttl_secs", self.blob.ticket_ttl_secs)?;
        positive("workers.count", self.workers.count as u64)?;
        positive("workers.lease_secs", self.workers.lease_secs)?;
        positive("workers.max_attempts", self.workers.max_attempts as u64)?;
        positive("workers.fetch_timeout_secs", self.workers.fetch_timeout_secs)?;
        positive("metrics.requests_per_interval", self.metrics.requests_per_interval as u64)?;
        positive("metrics.interval_secs", self.metrics.interval_secs)?;
        positive("metrics.batch_size", self.metrics.batch_size as u64)?;
        positive("metrics.max_attempts", self.metrics.max_attempts as u64)?;
        if self.workers.backoff_cap_secs < self.workers.backoff_base_secs {
            return Err(ConfigError::invalid("workers.backoff_cap_secs", "must not be below backoff_base_secs"));
        }
        self.sla()?;
        if let Some(url) = &self.feed.url {
            check_url("feed.url", url)?;
        }
        if let Some(url) = &self.metrics.base_url {
            check_url("metrics.base_url", url)?;
        }
        if let Some(url) = &self.advisories.url {
            check_url("advisories.url", url)?;
        }
        if self.log.level.parse::<tracing::Level>().is_err() {
            return Err(ConfigError::invalid("log.level", "expected trace, debug, info, warn or error"));
        }
        Ok(())
    }

    pub fn sla(&self) -> Result<Duration, ConfigError> {
        parse_duration(&self.latency.sla)
            .filter(|d| !d.is_zero())
            .ok_or_else(|| ConfigError::invalid("latency.sla", format!("bad duration {:?}", self.latency.sla)))
    }

    pub fn feed_url(&self) -> Result<&str, ConfigError> {
        self.feed.url.as_deref().ok_or(ConfigError::Missing("feed.url"))
    }

    pub fn feed_id(&self) -> Result<String, ConfigError> {
        Ok(self.feed.id.clone().unwrap_or(self.feed_url()?.to_string()))
    }

    pub fn store_path(&self) -> Result<&Path, ConfigError> {
        self.store.path.as_deref().ok_or(ConfigError::Missing("store.path"))
    }

    pub fn blob_root(&self) -> Result<&Path, ConfigError> {
        self.blob.root.as_deref().ok_or(ConfigError::Missing("blob.root"))
    }

    pub fn metrics_url(&self) -> Result<&str, ConfigError> {
        self.metrics.base_url.as_deref().ok_or(ConfigError::Missing("metrics.base_url"))
    }

    pub fn manager_config(&self) -> ManagerConfig {
        ManagerConfig {
            segment_size: self.blob.segment_size,
            ticket_ttl: Duration::from_secs(self.blob.ticket_ttl_secs),
            max_total_bytes: None,
            fsync: self.blob.fsync,
        }
    }

    pub fn queue_config(&self) -> QueueConfig {
        QueueConfig {
            lease: Duration::from_secs(self.workers.lease_secs),
            max_attempts: self.workers.max_attempts,
            backoff_base: Duration::from_secs(self.workers.backoff_base_secs),
            backoff_cap: Duration::from_secs(self.workers.backoff_cap_secs),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            budget: RateBudget {
                requests_per_interval: self.metrics.requests_per_interval,
                interval: Duration::from_secs(self.metrics.interval_secs),
                batch_size: self.metrics.batch_size,
            },
            max_attempts: self.metrics.max_attempts,
        }
    }
}

fn check_url(field: &str, url: &str) -> Result<(), ConfigError> {
    if url.starts_with("http://") || url.starts_with("https://") {
        Ok(())
    } else {
        Err(ConfigError::invalid(field, format!("expected an http(s) URL, got {url:?}")))
    }
}

// toml reports the key path in its message ("unknown field `x`") or span;
// pull a backticked name out when there is one.
fn error_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_validate() {
        let c = Config::from_toml("", &[]).unwrap();
        assert_eq!(c.workers.count, 4);
        assert_eq!(c.sla().unwrap(), Duration::from_secs(86_400));
        assert_eq!(c.sweep_config().budget, RateBudget::default());
    }

    #[test]
    fn file_then_env() {
        let text = "[feed]\nurl = \"http://localhost:5984/registry\"\n[workers]\ncount = 2\n";
        let c = Config::from_toml(text, &env(&[("FOLLOWER_WORKERS_COUNT", "9"), ("FOLLOWER_STORE_PATH", "/tmp/x.db")]))
            .unwrap();
        assert_eq!(c.workers.count, 9);
        assert_eq!(c.store_path().unwrap(), Path::new("/tmp/x.db"));
        assert_eq!(c.feed_id().unwrap(), "http://localhost:5984/registry");
        let c = Config::from_toml("", &env(&[("FOLLOWER_FEED_START", "1234")])).unwrap();
        assert_eq!(c.feed.start, "1234");
        let c = Config::from_toml("", &env(&[("FOLLOWER_BLOB_MANAGER_ADDR", "10.0.0.1:7070")])).unwrap();
        assert_eq!(c.blob.manager_addr.as_deref(), Some("10.0.0.1:7070"));
    }

    #[test]
    fn errors_name_the_field() {
        let e = Config::from_toml("", &[]).unwrap().store_path().unwrap_err();
        assert_eq!(e.field(), Some("store.path"));
        let e = Config::from_toml("[workers]\ncount = 0\n", &[]).unwrap_err();
        assert_eq!(e.field(), Some("workers.count"));
        let e = Config::from_toml("[blob]\nsegmentsize = 1\n", &[]).unwrap_err();
        assert_eq!(e.field(), Some("segmentsize"));
        let e = Config::from_toml("", &env(&[("FOLLOWER_WORKERS_COUNT", "many")])).unwrap_err();
        assert_eq!(e.field(), Some("workers.count"));
        let e = Config::from_toml("[latency]\nsla = \"soon\"\n", &[]).unwrap_err();
        assert_eq!(e.field(), Some("latency.sla"));
        let e = Config::from_toml("", &env(&[("FOLLOWER_NOPE_X", "1")])).unwrap_err();
        assert_eq!(e.kind(), "config-invalid");
    }
}
