//! The built-in function server run inside every sandbox.
//!
//! The image name selects a behavior: `echo` returns the request body,
//! `spin:<n>` runs `n` dependent square roots, `sleep:<ms>` waits.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use parking_lot::Mutex;
use tokio::net::TcpListener;

pub const SANDBOX_ID_HEADER: &str = "x-sandbox-id";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Echo,
    Spin(u64),
    Sleep(Duration),
}

#[derive(Debug, thiserror::Error)]
#[error("unknown sandbox image {0:?}; expected echo, spin:<iterations> or sleep:<ms>")]
pub struct UnknownImage(pub String);

impl FromStr for Behavior {
    type Err = UnknownImage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UnknownImage(s.to_string());
        match s.split_once(':') {
            None if s == "echo" => Ok(Behavior::Echo),
            Some(("spin", n)) => n.parse().map(Behavior::Spin).map_err(|_| bad()),
            Some(("sleep", ms)) => ms
                .parse()
                .map(|ms| Behavior::Sleep(Duration::from_millis(ms)))
                .map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// A chain of `iterations` dependent square roots.
pub fn spin(iterations: u64) -> f64 {
    let mut x = std::hint::black_box(2.0f64);
    for _ in 0..iterations {
        x = (x + 1.0).sqrt();
    }
    std::hint::black_box(x)
}

/// Spin iterations per millisecond on this host (best of a few runs).
pub fn calibrate() -> f64 {
    const N: u64 = 2_000_000;
    let best = (0..5)
        .map(|_| {
            let t = Instant::now();
            spin(N);
            t.elapsed()
        })
        .min()
        .unwrap_or(Duration::from_millis(1));
    N as f64 / (best.as_secs_f64() * 1000.0).max(1e-6)
}

/// Append-only record of execution starts, one `<request-id> <sandbox-id>`
/// line each. Shared by every sandbox on a host.
#[derive(Debug)]
pub struct ExecLog {
    file: Mutex<File>,
}

impl ExecLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    pub fn record(&self, request_id: &str, sandbox: u64) {
        let line = format!("{request_id} {sandbox}\n");
        // One write call per line keeps lines whole under O_APPEND.
        let _ = self.file.lock().write_all(line.as_bytes());
    }
}

struct Ctx {
    behavior: Behavior,
    id: u64,
    log: Option<Arc<ExecLog>>,
}

pub fn router(behavior: Behavior, id: u64, log: Option<Arc<ExecLog>>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/invoke", post(invoke))
        .with_state(Arc::new(Ctx { behavior, id, log }))
}

async fn invoke(State(ctx): State<Arc<Ctx>>, headers: HeaderMap, body: Bytes) -> Response {
    if let (Some(log), Some(rid)) = (
        &ctx.log,
        headers.get("x-request-id").and_then(|v| v.to_str().ok()),
    ) {
        log.record(rid, ctx.id);
    }
    let out = match ctx.behavior {
        Behavior::Echo => body,
        Behavior::Spin(n) => match tokio::task::spawn_blocking(move || spin(n)).await {
            Ok(x) => Bytes::from(format!("{x}")),
            Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        },
        Behavior::Sleep(d) => {
            tokio::time::sleep(d).await;
            Bytes::from_static(b"ok")
        }
    };
    ([(SANDBOX_ID_HEADER, ctx.id.to_string())], out).into_response()
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    behavior: Behavior,
    id: u64,
    log: Option<Arc<ExecLog>>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(behavior, id, log))
        .tcp_nodelay(true)
        .with_graceful_shutdown(shutdown)
        .await
}
