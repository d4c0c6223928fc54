//! Scrapers for data sources without a change feed: weekly download
//! metrics (batched and rate limited) and security advisories.

pub mod advisories;
pub mod metrics;
pub mod rate;

pub use advisories::{parse_osv, AdvisoryError, sync_advisories, AdvisorySource, AdvisorySyncReport, DirSource, HttpAdvisorySource};
pub use metrics::{plan_sweep, HttpMetricsClient, MetricsClient, MetricsError, MetricsSweeper, SweepConfig, SweepPlan, SweepReport};
pub use rate::{RateBudget, RateLimiter};
