//! Reference execution times, measured on a dedicated sandbox outside the
//! cluster: median of 20 timed runs after 5 warm-up runs.

use std::path::Path;
use std::process::Stdio;
use std::time::{Duration, Instant};

use anyhow::Context;

use crate::stats::median_after;

pub const WARMUP_RUNS: usize = 5;
pub const TIMED_RUNS: usize = 20;

/// Starts `bin sandbox` with `image` on `port`, invokes it sequentially and
/// returns the reference time in ms.
pub async fn exec_reference(bin: &Path, image: &str, port: u16) -> anyhow::Result<f64> {
    let mut child = tokio::process::Command::new(bin)
        .args([
            "sandbox",
            "--port",
            &port.to_string(),
            "--behavior",
            image,
            "--id",
            "0",
        ])
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .with_context(|| format!("spawning {}", bin.display()))?;
    let http = reqwest::Client::builder().tcp_nodelay(true).build()?;
    let base = format!("http://127.0.0.1:{port}");
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if matches!(http.get(format!("{base}/health")).send().await, Ok(r) if r.status().is_success())
        {
            break;
        }
        anyhow::ensure!(
            Instant::now() < deadline,
            "reference sandbox on port {port} never became ready"
        );
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let mut runs = Vec::with_capacity(WARMUP_RUNS + TIMED_RUNS);
    for _ in 0..WARMUP_RUNS + TIMED_RUNS {
        let t = Instant::now();
        let resp = http.post(format!("{base}/invoke")).body("x").send().await?;
        anyhow::ensure!(
            resp.status().is_success(),
            "reference invocation failed: {}",
            resp.status()
        );
        resp.bytes().await?;
        runs.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let _ = child.kill().await;
    median_after(&runs, WARMUP_RUNS).context("no timed runs")
}
