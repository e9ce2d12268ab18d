//! Data plane replica: client-facing invoke endpoint, control plane RPCs,
//! metrics reporting and cache synchronisation.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::sync::Notify;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use baton_core::config::Config;
use baton_core::metrics::MetricsText;
use baton_core::rpc::{rpc_route, LeaderClient, RpcClient};
use baton_core::time::monotonic_ms;
use baton_core::wire::{CpRequest, CpResponse, DpRequest, DpResponse, DpStatus, FunctionSnapshot};
use baton_core::{ComponentRecord, FunctionSpec, MetricsSample};

use crate::async_log::{AsyncEnvelope, AsyncLog, AsyncStatus};
use crate::cache::{FunctionCache, QueueError, Reservation};

pub const FUNCTION_HEADER: &str = "x-function-name";
pub const MODE_HEADER: &str = "x-invocation-mode";
pub const REQUEST_ID_HEADER: &str = "x-request-id";
/// Set on responses whose request had to wait for a sandbox.
pub const QUEUED_HEADER: &str = "x-baton-queued-ms";

type Functions = HashMap<String, Arc<FunctionCache>>;

/// Outcome of one synchronous pass through the data plane.
#[derive(Debug)]
pub enum InvokeError {
    UnknownFunction,
    QueueFull,
    QueueTimeout,
    Removed,
    Proxy(String),
}

impl InvokeError {
    fn status(&self) -> StatusCode {
        match self {
            InvokeError::UnknownFunction | InvokeError::Removed => StatusCode::NOT_FOUND,
            InvokeError::QueueFull | InvokeError::QueueTimeout => StatusCode::SERVICE_UNAVAILABLE,
            InvokeError::Proxy(_) => StatusCode::BAD_GATEWAY,
        }
    }
}

impl std::fmt::Display for InvokeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InvokeError::UnknownFunction => write!(f, "unknown function"),
            InvokeError::QueueFull => write!(f, "queue full"),
            InvokeError::QueueTimeout => write!(f, "no sandbox became available in time"),
            InvokeError::Removed => write!(f, "function removed"),
            InvokeError::Proxy(e) => write!(f, "sandbox unreachable: {e}"),
        }
    }
}

struct Invoked {
    body: Bytes,
    queued: Option<Duration>,
}

/// Decrements the function's in-flight count when the request leaves.
struct Inside(Arc<FunctionCache>);

impl Drop for Inside {
    fn drop(&mut self) {
        self.0.leave();
    }
}

struct Inner {
    cfg: Config,
    record: ComponentRecord,
    functions: ArcSwap<Functions>,
    cp: LeaderClient,
    proxy: reqwest::Client,
    async_log: Option<AsyncLog>,
    dirty: Mutex<HashSet<String>>,
    report_wake: Notify,
    reported: Mutex<HashMap<String, u64>>,
    synced: AtomicBool,
    last_contact_ms: AtomicU64,
    request_seq: AtomicU64,
    async_seq: AtomicU64,
    cancel: CancellationToken,
}

impl Inner {
    fn function(&self, name: &str) -> Option<Arc<FunctionCache>> {
        self.functions.load().get(name).cloned()
    }

    fn upsert(&self, spec: FunctionSpec) -> Arc<FunctionCache> {
        if let Some(c) = self.function(&spec.name) {
            if *c.spec() != spec {
                c.set_spec(spec);
            }
            return c;
        }
        let fresh = FunctionCache::new(spec.clone(), self.cfg.data_plane.queue_bound);
        let mut result = fresh.clone();
        self.functions.rcu(|map| {
            let mut map = HashMap::clone(map);
            result = map
                .entry(spec.name.clone())
                .or_insert_with(|| fresh.clone())
                .clone();
            map
        });
        result
    }

    fn remove(&self, name: &str) {
        let mut removed = None;
        self.functions.rcu(|map| {
            let mut map = HashMap::clone(map);
            removed = map.remove(name);
            map
        });
        if let Some(c) = removed {
            c.close();
        }
    }

    /// Replaces the function set with `specs`; endpoints are kept.
    fn sync(&self, specs: Vec<FunctionSpec>) {
        let keep: HashSet<String> = specs.iter().map(|s| s.name.clone()).collect();
        for spec in specs {
            self.upsert(spec);
        }
        let stale: Vec<String> = self
            .functions
            .load()
            .keys()
            .filter(|k| !keep.contains(*k))
            .cloned()
            .collect();
        for name in stale {
            self.remove(&name);
        }
    }

    fn install(&self, snapshots: Vec<FunctionSnapshot>) {
        let specs = snapshots.iter().map(|s| s.spec.clone()).collect();
        self.sync(specs);
        for s in snapshots {
            if let (Some(set), Some(c)) = (s.endpoints, self.function(&s.spec.name)) {
                c.apply(&set);
            }
        }
    }

    fn touch_contact(&self) {
        self.last_contact_ms
            .store(monotonic_ms(), Ordering::Relaxed);
    }

    fn mark_for_report(&self, name: &str) {
        self.dirty.lock().insert(name.to_string());
        self.report_wake.notify_one();
    }

    async fn run_sync(
        &self,
        cache: &Arc<FunctionCache>,
        body: Bytes,
        request_id: &str,
    ) -> Result<Invoked, InvokeError> {
        cache.enter();
        let _inside = Inside(cache.clone());
        let spec = cache.spec();
        let reservation = cache
            .acquire(spec.sched.queue_timeout, || {
                cache.counters.cold.fetch_add(1, Ordering::Relaxed);
                self.mark_for_report(&spec.name);
            })
            .await
            .map_err(|e| match e {
                QueueError::Full => InvokeError::QueueFull,
                QueueError::Timeout => InvokeError::QueueTimeout,
                QueueError::Gone => InvokeError::Removed,
            })?;
        let queued = reservation.queued_for();
        let result = match self
            .proxy(&reservation, &spec.name, body.clone(), request_id)
            .await
        {
            Err(ProxyError::Connect(e)) => {
                // The endpoint may be stale; try exactly one other one.
                let failed = reservation.endpoint().id;
                debug!(function = %spec.name, sandbox = failed, "connect failed, retrying elsewhere: {e}");
                drop(reservation);
                match cache.try_reserve_excluding(Some(failed)) {
                    Some(other) => self.proxy(&other, &spec.name, body, request_id).await,
                    None => Err(ProxyError::Connect(e)),
                }
            }
            other => other,
        };
        match result {
            Ok(body) => {
                cache.counters.succeeded.fetch_add(1, Ordering::Relaxed);
                Ok(Invoked { body, queued })
            }
            Err(e) => {
                cache.counters.failed.fetch_add(1, Ordering::Relaxed);
                Err(InvokeError::Proxy(e.to_string()))
            }
        }
    }

    async fn proxy(
        &self,
        r: &Reservation,
        function: &str,
        body: Bytes,
        request_id: &str,
    ) -> Result<Bytes, ProxyError> {
        let url = format!("http://{}/invoke", r.endpoint().address());
        let resp = self
            .proxy
            .post(url)
            .header(FUNCTION_HEADER, function)
            .header(REQUEST_ID_HEADER, request_id)
            .body(body)
            .send()
            .await
            .map_err(|e| {
                if e.is_connect() {
                    ProxyError::Connect(e.to_string())
                } else {
                    ProxyError::Other(e.to_string())
                }
            })?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| ProxyError::Other(e.to_string()))?;
        if !status.is_success() {
            return Err(ProxyError::Other(format!("sandbox answered {status}")));
        }
        Ok(bytes)
    }

    fn next_request_id(&self) -> String {
        format!(
            "{}-{}",
            self.record.port,
            self.request_seq.fetch_add(1, Ordering::Relaxed)
        )
    }

    // ---- async ----

    fn submit_async(self: &Arc<Self>, function: &str, payload: Bytes) -> Result<String, String> {
        let Some(log) = &self.async_log else {
            return Err("async invocations are disabled".into());
        };
        let id = format!(
            "{}-{}-{}",
            self.record.port,
            monotonic_ms(),
            self.async_seq.fetch_add(1, Ordering::Relaxed)
        );
        let env = AsyncEnvelope {
            id: id.clone(),
            function: function.to_string(),
            payload: B64.encode(&payload),
            attempts: 0,
            status: AsyncStatus::Queued,
            result: None,
            error: None,
        };
        log.record(&env)
            .map_err(|e| format!("cannot record request: {e}"))?;
        let me = self.clone();
        tokio::spawn(async move { me.drive_async(env).await });
        Ok(id)
    }

    async fn drive_async(self: Arc<Self>, mut env: AsyncEnvelope) {
        let log = self.async_log.as_ref().expect("async enabled");
        let payload = Bytes::from(B64.decode(&env.payload).unwrap_or_default());
        let attempts = self.cfg.data_plane.async_attempts.max(1);
        let mut backoff = self.cfg.data_plane.async_backoff;
        while env.attempts < attempts {
            env.attempts += 1;
            env.status = AsyncStatus::Running;
            if let Err(e) = log.record(&env) {
                warn!("async log write failed: {e}");
            }
            let outcome = match self.function(&env.function) {
                None => Err(InvokeError::UnknownFunction.to_string()),
                Some(cache) => {
                    let timeout = cache.spec().sched.queue_timeout;
                    match tokio::time::timeout(
                        timeout,
                        self.run_sync(&cache, payload.clone(), &env.id),
                    )
                    .await
                    {
                        Ok(Ok(done)) => Ok(done.body),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(_) => Err("attempt timed out".to_string()),
                    }
                }
            };
            match outcome {
                Ok(body) => {
                    env.status = AsyncStatus::Done;
                    env.result = Some(B64.encode(&body));
                    env.error = None;
                    if let Err(e) = log.record(&env) {
                        warn!("async log write failed: {e}");
                    }
                    return;
                }
                Err(e) => {
                    debug!(id = %env.id, attempt = env.attempts, "async attempt failed: {e}");
                    env.error = Some(e);
                    if env.attempts < attempts {
                        tokio::select! {
                            _ = tokio::time::sleep(backoff) => {}
                            _ = self.cancel.cancelled() => return,
                        }
                        backoff *= 2;
                    }
                }
            }
        }
        env.status = AsyncStatus::Failed;
        if let Err(e) = log.record(&env) {
            warn!("async log write failed: {e}");
        }
    }

    // ---- control plane interaction ----

    async fn register(&self) {
        let mut delay = Duration::from_millis(50);
        loop {
            match self
                .cp
                .call_within(
                    &CpRequest::RegisterComponent(self.record.clone()),
                    Duration::from_secs(2),
                )
                .await
            {
                Ok(CpResponse::Registered { functions, .. }) => {
                    self.install(functions);
                    self.touch_contact();
                    self.synced.store(true, Ordering::Release);
                    info!(
                        functions = self.functions.load().len(),
                        "data plane registered and synced"
                    );
                    return;
                }
                Ok(other) => warn!("unexpected registration reply: {other:?}"),
                Err(e) => debug!("registration failed: {e}"),
            }
            tokio::select! {
                _ = tokio::time::sleep(delay) => {}
                _ = self.cancel.cancelled() => return,
            }
            delay = (delay * 2).min(Duration::from_secs(1));
        }
    }

    async fn control_loop(self: Arc<Self>) {
        self.register().await;
        let mut tick = tokio::time::interval(self.cfg.control.heartbeat_interval);
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = self.cancel.cancelled() => return,
            }
            let req = CpRequest::Heartbeat {
                record: self.record.clone(),
                usage: None,
            };
            match self
                .cp
                .call_within(&req, self.cfg.control.heartbeat_interval)
                .await
            {
                Ok(CpResponse::Reregister) => self.register().await,
                Ok(_) => self.touch_contact(),
                Err(e) => debug!("heartbeat failed: {e}"),
            }
        }
    }

    async fn report_loop(self: Arc<Self>) {
        let mut tick = tokio::time::interval(self.cfg.data_plane.metrics_period);
        loop {
            let periodic = tokio::select! {
                _ = tick.tick() => true,
                _ = self.report_wake.notified() => false,
                _ = self.cancel.cancelled() => return,
            };
            let mut names: HashSet<String> = std::mem::take(&mut *self.dirty.lock());
            let functions = self.functions.load();
            if periodic {
                let reported = self.reported.lock();
                for (name, cache) in functions.iter() {
                    if cache.inflight() > 0 || reported.get(name).copied().unwrap_or(0) > 0 {
                        names.insert(name.clone());
                    }
                }
            }
            if names.is_empty() {
                continue;
            }
            let now = monotonic_ms();
            let samples: Vec<MetricsSample> = names
                .into_iter()
                .filter_map(|name| {
                    let inflight = functions.get(&name)?.inflight();
                    Some(MetricsSample {
                        function: name,
                        inflight,
                        timestamp_ms: now,
                    })
                })
                .collect();
            {
                let mut reported = self.reported.lock();
                for s in &samples {
                    reported.insert(s.function.clone(), s.inflight);
                }
            }
            let req = CpRequest::Metrics {
                from: self.record.address(),
                samples,
            };
            match self.cp.call_within(&req, Duration::from_secs(1)).await {
                Ok(_) => self.touch_contact(),
                Err(e) => debug!("metrics report dropped: {e}"),
            }
        }
    }

    fn handle_rpc(&self, req: DpRequest, leader: Option<String>) -> DpResponse {
        if let Some(l) = leader {
            self.cp.set_leader(&l);
            self.touch_contact();
        }
        match req {
            DpRequest::AddFunction(spec) => {
                self.upsert(spec);
            }
            DpRequest::RemoveFunction { name } => self.remove(&name),
            DpRequest::SyncFunctions(specs) => self.sync(specs),
            DpRequest::UpdateEndpoints(sets) => {
                for set in sets {
                    if let Some(c) = self.function(&set.function) {
                        c.apply(&set);
                    }
                }
            }
            DpRequest::Status => return DpResponse::Status(self.status()),
        }
        DpResponse::Ack
    }

    fn status(&self) -> DpStatus {
        let functions = self.functions.load();
        let mut names: Vec<String> = functions.keys().cloned().collect();
        names.sort();
        let endpoints = names.iter().map(|n| functions[n].endpoint_set()).collect();
        DpStatus {
            functions: names,
            endpoints,
            synced: self.synced.load(Ordering::Acquire),
        }
    }
}

enum ProxyError {
    Connect(String),
    Other(String),
}

impl std::fmt::Display for ProxyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProxyError::Connect(e) => write!(f, "connect: {e}"),
            ProxyError::Other(e) => write!(f, "{e}"),
        }
    }
}

/// Handle to a running data plane replica.
pub struct DataPlane {
    inner: Arc<Inner>,
    addr: SocketAddr,
}

impl DataPlane {
    /// Serves on `listener` and registers with the control plane in the
    /// background. `async_log` enables async invocations.
    pub async fn start(
        cfg: Config,
        listener: TcpListener,
        async_log: Option<std::path::PathBuf>,
    ) -> anyhow::Result<Self> {
        let addr = listener.local_addr()?;
        anyhow::ensure!(
            !cfg.control.replicas.is_empty(),
            "no control plane replicas configured"
        );
        let record = ComponentRecord::data_plane(cfg.node.advertise, addr.port());
        let cp = LeaderClient::new(
            RpcClient::new(Duration::from_secs(2)),
            cfg.control.replicas.clone(),
        );
        let proxy = reqwest::Client::builder()
            .tcp_nodelay(true)
            .connect_timeout(Duration::from_millis(500))
            .pool_idle_timeout(Duration::from_secs(30))
            .pool_max_idle_per_host(256)
            .build()?;
        let cancel = CancellationToken::new();
        let (log, unfinished) = match async_log {
            Some(path) => {
                let (log, unfinished) = AsyncLog::open(&path)?;
                (Some(log), unfinished)
            }
            None => (None, Vec::new()),
        };
        let body_limit = cfg.data_plane.body_limit;
        let inner = Arc::new(Inner {
            cfg,
            record,
            functions: ArcSwap::from_pointee(HashMap::new()),
            cp,
            proxy,
            async_log: log,
            dirty: Mutex::new(HashSet::new()),
            report_wake: Notify::new(),
            reported: Mutex::new(HashMap::new()),
            synced: AtomicBool::new(false),
            last_contact_ms: AtomicU64::new(monotonic_ms()),
            request_seq: AtomicU64::new(0),
            async_seq: AtomicU64::new(0),
            cancel: cancel.clone(),
        });

        let rpc_state = inner.clone();
        let app = rpc_route(move |req: DpRequest, leader: Option<String>| {
            let s = rpc_state.clone();
            async move { s.handle_rpc(req, leader) }
        })
        .merge(
            Router::new()
                .route("/invoke", post(invoke))
                .route("/async/:id", get(async_status))
                .route("/metrics", get(metrics))
                .route("/health", get(health))
                .with_state(inner.clone()),
        )
        .layer(DefaultBodyLimit::max(body_limit));
        let serve_cancel = cancel.clone();
        tokio::spawn(async move {
            let shutdown = async move { serve_cancel.cancelled().await };
            if let Err(e) = axum::serve(listener, app)
                .tcp_nodelay(true)
                .with_graceful_shutdown(shutdown)
                .await
            {
                warn!("data plane server stopped: {e}");
            }
        });
        tokio::spawn(inner.clone().control_loop());
        tokio::spawn(inner.clone().report_loop());
        if !unfinished.is_empty() {
            info!(
                count = unfinished.len(),
                "resuming unfinished async invocations"
            );
            let me = inner.clone();
            tokio::spawn(async move {
                // Give the cache a chance to sync before retrying.
                let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
                while !me.synced.load(Ordering::Acquire) && tokio::time::Instant::now() < deadline {
                    tokio::time::sleep(Duration::from_millis(20)).await;
                }
                for env in unfinished {
                    tokio::spawn(me.clone().drive_async(env));
                }
            });
        }
        info!(%addr, "data plane started");
        Ok(Self { inner, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn status(&self) -> DpStatus {
        self.inner.status()
    }

    pub fn function(&self, name: &str) -> Option<Arc<FunctionCache>> {
        self.inner.function(name)
    }

    pub fn shutdown(&self) {
        self.inner.cancel.cancel();
    }
}

impl Drop for DataPlane {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn invoke(State(inner): State<Arc<Inner>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(name) = headers.get(FUNCTION_HEADER).and_then(|v| v.to_str().ok()) else {
        return (StatusCode::BAD_REQUEST, "missing X-Function-Name header").into_response();
    };
    let mode = headers
        .get(MODE_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("sync");
    let Some(cache) = inner.function(name) else {
        return (StatusCode::NOT_FOUND, format!("unknown function {name}")).into_response();
    };
    match mode {
        "sync" => {
            let id = match headers.get(REQUEST_ID_HEADER).and_then(|v| v.to_str().ok()) {
                Some(id) => id.to_string(),
                None => inner.next_request_id(),
            };
            match inner.run_sync(&cache, body, &id).await {
                Ok(done) => {
                    let mut resp = (StatusCode::OK, done.body).into_response();
                    if let Some(q) = done.queued {
                        resp.headers_mut()
                            .insert(QUEUED_HEADER, HeaderValue::from(q.as_millis() as u64));
                    }
                    resp
                }
                Err(e) => (e.status(), e.to_string()).into_response(),
            }
        }
        "async" => match inner.submit_async(name, body) {
            Ok(id) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "id": id }))).into_response(),
            Err(e) => (StatusCode::SERVICE_UNAVAILABLE, e).into_response(),
        },
        other => (
            StatusCode::BAD_REQUEST,
            format!("unknown invocation mode {other}"),
        )
            .into_response(),
    }
}

async fn async_status(State(inner): State<Arc<Inner>>, Path(id): Path<String>) -> Response {
    match inner.async_log.as_ref().and_then(|l| l.get(&id)) {
        Some(env) => Json(env).into_response(),
        None => (StatusCode::NOT_FOUND, "unknown request").into_response(),
    }
}

async fn health(State(inner): State<Arc<Inner>>) -> StatusCode {
    if inner.synced.load(Ordering::Acquire) {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    }
}

async fn metrics(State(inner): State<Arc<Inner>>) -> String {
    let mut out = MetricsText::new();
    let functions = inner.functions.load();
    out.global("functions", functions.len());
    out.global("synced", u8::from(inner.synced.load(Ordering::Acquire)));
    out.global(
        "cache_staleness_ms",
        monotonic_ms().saturating_sub(inner.last_contact_ms.load(Ordering::Relaxed)),
    );
    if let Some(log) = &inner.async_log {
        let counts = log.counts();
        for (status, label) in [
            (AsyncStatus::Queued, "async_queued"),
            (AsyncStatus::Running, "async_running"),
            (AsyncStatus::Done, "async_done"),
            (AsyncStatus::Failed, "async_failed"),
        ] {
            out.global(label, counts.get(&status).copied().unwrap_or(0));
        }
    }
    let mut names: Vec<&String> = functions.keys().collect();
    names.sort();
    for name in names {
        let c = &functions[name];
        out.function("inflight", name, c.inflight());
        out.function("queue_depth", name, c.queued());
        out.function(
            "invocations_succeeded",
            name,
            c.counters.succeeded.load(Ordering::Relaxed),
        );
        out.function(
            "invocations_failed",
            name,
            c.counters.failed.load(Ordering::Relaxed),
        );
        out.function("cold_starts", name, c.counters.cold.load(Ordering::Relaxed));
        out.function("endpoints", name, c.table().endpoints.len());
        out.function("endpoint_version", name, c.version());
    }
    out.finish()
}
