//! Runs a blob manager behind its TCP protocol, writes from two threads
//! through remote clients, then reads back and prints size statistics.

use std::sync::Arc;
use std::thread;

use registry_follower::blob::{BlobKey, BlobManager, BlobWorker, ManagerConfig, ManagerServer, RemoteManager};
use registry_follower::clock::SystemClock;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let config = ManagerConfig { segment_size: 64 * 1024, ..ManagerConfig::default() };
    let manager = Arc::new(BlobManager::open(dir.path(), config, Arc::new(SystemClock)).unwrap());
    let server = ManagerServer::start("127.0.0.1:0", manager).unwrap();
    println!("manager on {}", server.addr());

    let writers: Vec<_> = (0..2)
        .map(|w| {
            let addr = server.addr().to_string();
            let root = dir.path().to_path_buf();
            thread::spawn(move || {
                let blobs = BlobWorker::new(Arc::new(RemoteManager::new(addr)), root);
                for i in 0..50 {
                    let body = vec![b'a' + w as u8; 100 + i * 40];
                    blobs.put(&BlobKey::new(format!("pkg-{w}@1.0.{i}")), &body).unwrap();
                }
            })
        })
        .collect();
    for w in writers {
        w.join().unwrap();
    }

    let reader = BlobWorker::new(Arc::new(RemoteManager::new(server.addr().to_string())), dir.path());
    let key = BlobKey::new("pkg-1@1.0.7");
    let bytes = reader.get(&key).unwrap();
    let loc = reader.manager().lookup(&key).unwrap();
    println!("{key}: {} bytes at {}+{}", bytes.len(), loc.file_name, loc.byte_offset);
    println!("missing: {}", reader.get(&BlobKey::new("nope@0.0.0")).unwrap_err().kind());

    let stats = reader.manager().stats(Some(1000)).unwrap();
    println!("{}", serde_json::to_string_pretty(&stats).unwrap());
}
