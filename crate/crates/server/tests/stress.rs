use std::net::SocketAddr;
use std::sync::Arc;

use flowcube_core::querygen::QuerySpec;
use flowcube_server::stress::replay;
use flowcube_server::{spawn, AppState, ServiceConfig};

#[tokio::test]
async fn replay_reports_every_sample() {
    // no snapshot: every request is a fast 503, which still yields a sample
    let state = Arc::new(AppState::new(ServiceConfig::default()));
    let (addr, _stop, _) = spawn(SocketAddr::from(([127, 0, 0, 1], 0)), state).await.unwrap();
    let queries = vec![QuerySpec { level: 1, bbox: [0.0, 0.0, 1.0, 1.0], window: None }; 50];
    let report = replay(&format!("http://{addr}"), "population", &queries, 500.0).await;
    assert_eq!(report.samples_ms.len(), 50);
    assert_eq!(report.latency.count, 50);
    assert_eq!(report.errors, 50);
    assert_eq!(report.status_counts.get(&503), Some(&50));
    assert!(report.latency.median_ms <= report.latency.p90_ms);
}
