//! Submission instants must not depend on how slowly the target answers.

use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::Router;
use baton_harness::client::ClusterClient;
use baton_harness::replay::{constant_rate, replay, ReplayOptions};
use baton_harness::report::Report;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn drift_is_independent_of_response_latency() {
    // Every response takes 300 ms, longer than 30 inter-arrival gaps.
    let app = Router::new().route(
        "/invoke",
        post(|| async {
            tokio::time::sleep(Duration::from_millis(300)).await;
            "ok"
        }),
    );
    // The target runs on its own runtime, as a separate process would.
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    std_listener.set_nonblocking(true).unwrap();
    let addr = std_listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
            axum::serve(listener, app).await
        })
    });

    let client = ClusterClient::new(vec!["127.0.0.1:9".into()], addr.to_string());
    let functions: Vec<Arc<str>> = vec![Arc::from("f")];
    let plan = constant_rate(100.0, Duration::from_secs(5), &functions);
    let records = replay(&client, &plan, &ReplayOptions::default()).await;
    assert_eq!(records.len(), plan.len());
    assert!(records.iter().all(|r| r.ok()));
    // Responses overlap: at least 25 in flight at once.
    let overlapping = records
        .iter()
        .filter(|r| r.t_submit < records[0].t_response)
        .count();
    assert!(overlapping >= 25, "{overlapping}");
    let drift = Report::build(&records, 0.0, 1).submit_drift;
    let p99 = drift.p99.unwrap();
    eprintln!("submission drift p50 {:?} p99 {p99:.3} ms", drift.p50);
    assert!(p99 < 1.0, "p99 drift {p99} ms");
}
