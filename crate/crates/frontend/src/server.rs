//! The router process: health-probes data plane replicas, applies control
//! plane membership notifications and forwards invocations.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use baton_core::config::FrontendConfig;
use baton_core::metrics::MetricsText;
use baton_core::rpc::rpc_route;
use baton_core::wire::{FeRequest, FeResponse};

use crate::route::RoutingTable;

const FUNCTION_HEADER: &str = "x-function-name";
const FORWARDED: [&str; 4] = [
    "x-function-name",
    "x-invocation-mode",
    "x-request-id",
    "content-type",
];

#[derive(Debug)]
struct Member {
    address: String,
    healthy: bool,
    failures: u32,
    successes: u32,
}

struct Inner {
    cfg: FrontendConfig,
    /// Every replica ever learned of, in a stable order.
    members: Mutex<Vec<Member>>,
    table: ArcSwap<RoutingTable>,
    client: reqwest::Client,
    probe: reqwest::Client,
    forwarded: AtomicU64,
    unavailable: AtomicU64,
    upstream_errors: AtomicU64,
    per_replica: Mutex<HashMap<String, u64>>,
}

impl Inner {
    /// Rebuilds the table from the healthy members; bumps the generation
    /// only if the list changed.
    fn rebuild(&self, members: &[Member]) {
        let replicas: Vec<String> = members
            .iter()
            .filter(|m| m.healthy)
            .map(|m| m.address.clone())
            .collect();
        let current = self.table.load();
        if current.replicas != replicas {
            info!(
                ?replicas,
                generation = current.generation + 1,
                "routing table changed"
            );
            self.table.store(Arc::new(RoutingTable::new(
                replicas,
                current.generation + 1,
            )));
        }
    }

    fn set_health(&self, address: &str, healthy: bool) {
        let mut members = self.members.lock();
        match members.iter_mut().find(|m| m.address == address) {
            Some(m) => {
                m.healthy = healthy;
                m.failures = 0;
                m.successes = 0;
            }
            None => members.push(Member {
                address: address.to_string(),
                healthy,
                failures: 0,
                successes: 0,
            }),
        }
        self.rebuild(&members);
    }

    fn handle_rpc(&self, req: FeRequest) -> FeResponse {
        match req {
            FeRequest::AddReplica { address } => self.set_health(&address, true),
            FeRequest::RemoveReplica { address } => self.set_health(&address, false),
            FeRequest::Table => {
                let t = self.table.load();
                return FeResponse::Table {
                    replicas: t.replicas.clone(),
                    generation: t.generation,
                };
            }
        }
        FeResponse::Ack
    }

    async fn probe_loop(self: Arc<Self>, cancel: CancellationToken) {
        let mut tick = tokio::time::interval(self.cfg.probe_interval);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = cancel.cancelled() => return,
            }
            let addresses: Vec<String> = self
                .members
                .lock()
                .iter()
                .map(|m| m.address.clone())
                .collect();
            let probes = addresses.into_iter().map(|a| {
                let probe = self.probe.clone();
                async move {
                    let ok = matches!(
                        probe.get(format!("http://{a}/health")).send().await,
                        Ok(r) if r.status().is_success()
                    );
                    (a, ok)
                }
            });
            let results = futures::future::join_all(probes).await;
            let mut members = self.members.lock();
            for (address, ok) in results {
                let Some(m) = members.iter_mut().find(|m| m.address == address) else {
                    continue;
                };
                if ok {
                    m.failures = 0;
                    m.successes = m.successes.saturating_add(1);
                    // Re-admission needs as many consecutive successes as
                    // removal needs failures.
                    if !m.healthy && m.successes >= self.cfg.probe_failures {
                        info!(%address, "data plane replica healthy again");
                        m.healthy = true;
                    }
                } else {
                    m.successes = 0;
                    m.failures = m.failures.saturating_add(1);
                    if m.healthy && m.failures >= self.cfg.probe_failures {
                        warn!(%address, "data plane replica failed its health probes");
                        m.healthy = false;
                    }
                }
            }
            self.rebuild(&members);
        }
    }

    async fn forward(
        &self,
        target: &str,
        method: Method,
        uri: &Uri,
        headers: &HeaderMap,
        body: Bytes,
    ) -> Response {
        let path = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
        let mut req = self
            .client
            .request(method, format!("http://{target}{path}"))
            .body(body);
        for name in FORWARDED {
            if let Some(v) = headers.get(name) {
                req = req.header(name, v);
            }
        }
        *self
            .per_replica
            .lock()
            .entry(target.to_string())
            .or_default() += 1;
        self.forwarded.fetch_add(1, Ordering::Relaxed);
        match req.send().await {
            Ok(resp) => {
                let status = resp.status();
                let mut out = HeaderMap::new();
                for (k, v) in resp.headers() {
                    if k.as_str().starts_with("x-") || k == "content-type" {
                        out.insert(k.clone(), v.clone());
                    }
                }
                match resp.bytes().await {
                    Ok(b) => (status, out, b).into_response(),
                    Err(e) => self.upstream_error(target, e),
                }
            }
            Err(e) => self.upstream_error(target, e),
        }
    }

    fn upstream_error(&self, target: &str, e: reqwest::Error) -> Response {
        self.upstream_errors.fetch_add(1, Ordering::Relaxed);
        debug!(%target, "forwarding failed: {e}");
        (
            StatusCode::BAD_GATEWAY,
            format!("data plane {target} unreachable: {e}"),
        )
            .into_response()
    }
}

/// Handle to a running router.
pub struct Frontend {
    inner: Arc<Inner>,
    addr: SocketAddr,
    cancel: CancellationToken,
}

impl Frontend {
    pub async fn start(cfg: FrontendConfig, listener: TcpListener) -> anyhow::Result<Self> {
        let addr = listener.local_addr()?;
        let client = reqwest::Client::builder()
            .tcp_nodelay(true)
            .connect_timeout(Duration::from_millis(500))
            .pool_max_idle_per_host(256)
            .build()?;
        // Fresh connection per probe, so a dead listener is noticed even
        // while old connections linger.
        let probe = reqwest::Client::builder()
            .pool_max_idle_per_host(0)
            .connect_timeout(cfg.probe_interval)
            .timeout(cfg.probe_interval)
            .build()?;
        let members = cfg
            .dataplanes
            .iter()
            .map(|a| Member {
                address: a.clone(),
                healthy: true,
                failures: 0,
                successes: 0,
            })
            .collect::<Vec<_>>();
        let inner = Arc::new(Inner {
            table: ArcSwap::from_pointee(RoutingTable::new(cfg.dataplanes.clone(), 1)),
            cfg,
            members: Mutex::new(members),
            client,
            probe,
            forwarded: AtomicU64::new(0),
            unavailable: AtomicU64::new(0),
            upstream_errors: AtomicU64::new(0),
            per_replica: Mutex::new(HashMap::new()),
        });
        let cancel = CancellationToken::new();
        let rpc_state = inner.clone();
        let app = rpc_route(move |req: FeRequest, _leader: Option<String>| {
            let s = rpc_state.clone();
            async move { s.handle_rpc(req) }
        })
        .merge(
            Router::new()
                .route("/health", get(|| async { StatusCode::OK }))
                .route("/metrics", get(metrics))
                .fallback(proxy)
                .with_state(inner.clone()),
        )
        .layer(DefaultBodyLimit::disable());
        let serve_cancel = cancel.clone();
        tokio::spawn(async move {
            let shutdown = async move { serve_cancel.cancelled().await };
            if let Err(e) = axum::serve(listener, app)
                .tcp_nodelay(true)
                .with_graceful_shutdown(shutdown)
                .await
            {
                warn!("front-end server stopped: {e}");
            }
        });
        tokio::spawn(inner.clone().probe_loop(cancel.clone()));
        info!(%addr, "front-end router started");
        Ok(Self {
            inner,
            addr,
            cancel,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn table(&self) -> Arc<RoutingTable> {
        self.inner.table.load_full()
    }

    pub fn shutdown(&self) {
        self.cancel.cancel();
    }
}

impl Drop for Frontend {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn proxy(
    State(inner): State<Arc<Inner>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let table = inner.table.load_full();
    if let Some(function) = headers.get(FUNCTION_HEADER).and_then(|v| v.to_str().ok()) {
        return match table.route(function) {
            Ok(target) => inner.forward(target, method, &uri, &headers, body).await,
            Err(e) => {
                inner.unavailable.fetch_add(1, Ordering::Relaxed);
                (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response()
            }
        };
    }
    // Requests without a function (async status lookups) go to whichever
    // replica knows the answer.
    if method == Method::GET && uri.path().starts_with("/async/") {
        for target in &table.replicas {
            let resp = inner
                .forward(target, Method::GET, &uri, &headers, Bytes::new())
                .await;
            if resp.status() != StatusCode::NOT_FOUND && resp.status() != StatusCode::BAD_GATEWAY {
                return resp;
            }
        }
        return (StatusCode::NOT_FOUND, "unknown request").into_response();
    }
    (StatusCode::BAD_REQUEST, "missing X-Function-Name header").into_response()
}

async fn metrics(State(inner): State<Arc<Inner>>) -> String {
    let mut out = MetricsText::new();
    let table = inner.table.load();
    out.global("generation", table.generation);
    out.global("healthy_replicas", table.replicas.len());
    out.global("forwarded", inner.forwarded.load(Ordering::Relaxed));
    out.global("unavailable", inner.unavailable.load(Ordering::Relaxed));
    out.global(
        "upstream_errors",
        inner.upstream_errors.load(Ordering::Relaxed),
    );
    let per = inner.per_replica.lock();
    let mut keys: Vec<&String> = per.keys().collect();
    keys.sort();
    for k in keys {
        out.function("forwarded_to", k, per[k]);
    }
    out.finish()
}
