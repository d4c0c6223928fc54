//! Plans a rate-limited download-count sweep and turns an OSV advisory
//! into stored records.

use std::time::Duration;

use registry_follower::clock::parse_ts;
use registry_follower::scrapers::{parse_osv, plan_sweep, RateBudget};
use serde_json::json;

fn main() {
    let mut names: Vec<String> = (0..1000).map(|i| format!("pkg-{i:04}")).collect();
    names.push("@scope/tool".into());
    let budget = RateBudget { requests_per_interval: 1, interval: Duration::from_secs(60), batch_size: 128 };
    let plan = plan_sweep(&names, &budget, parse_ts("2024-06-03T00:00:00Z").unwrap());
    println!(
        "{} packages in {} requests, done by {}",
        plan.package_count(),
        plan.batches.len(),
        plan.estimated_completion
    );

    let advisory = json!({
        "id": "GHSA-xxxx-0001",
        "modified": "2024-05-01T00:00:00Z",
        "affected": [
            {"package": {"ecosystem": "npm", "name": "tiny-utils"},
             "ranges": [{"type": "SEMVER", "events": [{"introduced": "0"}, {"fixed": "2.3.1"}]}]},
            {"package": {"ecosystem": "npm", "name": "tiny-utils-cli"},
             "ranges": [{"type": "SEMVER", "events": [{"introduced": "1.0.0"}, {"last_affected": "1.4.0"}]}]}
        ]
    });
    for record in parse_osv(&advisory).unwrap() {
        println!("{} {} {:?}", record.advisory_id, record.package_name, record.ranges.iter().map(|r| &r.constraint_raw).collect::<Vec<_>>());
    }
}
