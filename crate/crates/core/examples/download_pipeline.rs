//! Queues three tarballs, one of which fails twice before succeeding and
//! one of which is gone, drains the queue on a simulated clock and prints
//! job states and the latency summary.

use std::sync::Arc;
use std::time::Duration;

use registry_follower::blob::{BlobKey, BlobManager, BlobWorker, ManagerConfig};
use registry_follower::clock::{parse_ts, SimClock};
use registry_follower::pipeline::{latency_report, Queue, QueueConfig, StaticFetcher, Worker};
use registry_follower::store::Store;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let clock = SimClock::shared(parse_ts("2024-03-01T00:00:00Z").unwrap());
    let store = Arc::new(Store::open_in_memory().unwrap());
    let queue = Queue::new(store.clone(), clock.clone(), QueueConfig::default());
    let manager = Arc::new(BlobManager::open(dir.path(), ManagerConfig::default(), clock.clone()).unwrap());

    let fetcher = Arc::new(StaticFetcher::new());
    fetcher.insert("http://r/a.tgz", b"aaaa".to_vec());
    fetcher.insert("http://r/c.tgz", b"cccccc".to_vec());
    fetcher.fail_first("http://r/c.tgz", &[503, 503]);
    for (key, url) in [("a@1.0.0", "http://r/a.tgz"), ("b@1.0.0", "http://r/b.tgz"), ("c@1.0.0", "http://r/c.tgz")] {
        queue.enqueue(&BlobKey::new(key), url).unwrap();
    }

    let worker = Worker::new("w1", queue.clone(), fetcher, BlobWorker::new(manager, dir.path()));
    let report = worker.drain_all().unwrap();
    println!("{report:?}");
    for job in queue.jobs().unwrap() {
        println!("{:<10} {:<8} attempts={}", job.blob_key.to_string(), job.state.as_str(), job.attempts);
    }
    let latency = latency_report(&store, Duration::from_secs(60)).unwrap().unwrap();
    println!("{}", serde_json::to_string(&latency).unwrap());
}
