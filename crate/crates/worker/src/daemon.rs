//! The worker daemon: executes sandbox commands, probes readiness, reports
//! usage and crashes to the control plane.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::routing::get;
use axum::Router;
use parking_lot::RwLock;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Semaphore};
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use baton_core::config::{Config, RuntimeKind};
use baton_core::metrics::MetricsText;
use baton_core::rpc::{rpc_route, LeaderClient, RpcClient};
use baton_core::wire::{
    CpRequest, CpResponse, ErrorCode, Failure, ListedSandbox, WorkerRequest, WorkerResponse,
    WorkerUsage,
};
use baton_core::{ComponentRecord, FunctionSpec, SandboxRecord};

use crate::ports::PortPool;
use crate::runtime::{ExitSink, Probe, ProcessRuntime, Runtime, StubRuntime};
use crate::sandbox::ExecLog;

/// Sentinel until the control plane assigns an index.
const UNREGISTERED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Creating,
    Probing,
    Ready,
}

struct LocalSandbox {
    function: String,
    cpu: u32,
    mem: u32,
    record: SandboxRecord,
    phase: Phase,
    /// Cancelled when the sandbox is killed before it became ready.
    cancel: CancellationToken,
}

struct Inner {
    cfg: Config,
    record: ComponentRecord,
    runtime: Arc<dyn Runtime>,
    probe: Probe,
    ports: PortPool,
    creates: Semaphore,
    sandboxes: RwLock<HashMap<u64, LocalSandbox>>,
    index: AtomicU32,
    cp: LeaderClient,
    probe_client: reqwest::Client,
    cancel: CancellationToken,
}

impl Inner {
    fn index(&self) -> Option<u16> {
        match self.index.load(Ordering::Acquire) {
            UNREGISTERED => None,
            i => Some(i as u16),
        }
    }

    fn create(self: &Arc<Self>, id: u64, spec: FunctionSpec) -> WorkerResponse {
        let Some(index) = self.index() else {
            return WorkerResponse::Error(Failure::new(
                ErrorCode::Unavailable,
                "worker not registered yet",
            ));
        };
        if let Err(e) = spec.validate() {
            return WorkerResponse::Error(Failure::new(ErrorCode::Invalid, e.to_string()));
        }
        let cancel = {
            let mut sandboxes = self.sandboxes.write();
            if sandboxes.contains_key(&id) {
                return WorkerResponse::Accepted;
            }
            let Some(port) = self.ports.lease(id) else {
                return WorkerResponse::Error(Failure::new(
                    ErrorCode::Rejected,
                    "port pool exhausted",
                ));
            };
            let record = SandboxRecord {
                id,
                ip: self.record.ip,
                port,
                worker_index: index,
            };
            let cancel = CancellationToken::new();
            sandboxes.insert(
                id,
                LocalSandbox {
                    function: spec.name.clone(),
                    cpu: spec.sched.cpu_request,
                    mem: spec.sched.mem_request,
                    record,
                    phase: Phase::Creating,
                    cancel: cancel.clone(),
                },
            );
            cancel
        };
        let me = self.clone();
        tokio::spawn(async move { me.bring_up(id, spec, cancel).await });
        WorkerResponse::Accepted
    }

    async fn bring_up(self: Arc<Self>, id: u64, spec: FunctionSpec, cancel: CancellationToken) {
        let Some(port) = self.ports.port_of(id) else {
            return;
        };
        let outcome = tokio::select! {
            r = self.launch_and_probe(id, &spec, port) => r,
            _ = cancel.cancelled() => Err("killed before ready".to_string()),
        };
        let record = match outcome {
            Ok(()) => {
                // Readiness is only declared if the sandbox was not killed
                // meanwhile; the kill path removes the entry under this lock.
                let mut sandboxes = self.sandboxes.write();
                match sandboxes.get_mut(&id) {
                    Some(s) if !s.cancel.is_cancelled() => {
                        s.phase = Phase::Ready;
                        Some(s.record)
                    }
                    _ => None,
                }
            }
            Err(reason) => {
                let _ = self.runtime.kill(id).await;
                self.ports.release(id);
                let reported = self.sandboxes.write().remove(&id).is_some();
                if reported {
                    debug!(sandbox = id, function = %spec.name, "creation failed: {reason}");
                    self.report_failure(&spec.name, id, &reason).await;
                }
                return;
            }
        };
        match record {
            Some(record) => {
                let index = record.worker_index;
                let req = CpRequest::SandboxReady {
                    worker_index: index,
                    function: spec.name.clone(),
                    record,
                };
                if let Err(e) = self.cp.call_within(&req, Duration::from_secs(5)).await {
                    // The control plane learns about it on the next merge.
                    debug!(sandbox = id, "ready report failed: {e}");
                }
            }
            None => {
                let _ = self.runtime.kill(id).await;
                self.ports.release(id);
            }
        }
    }

    async fn launch_and_probe(
        &self,
        id: u64,
        spec: &FunctionSpec,
        port: u16,
    ) -> Result<(), String> {
        let _permit = self.creates.acquire().await.map_err(|e| e.to_string())?;
        self.runtime
            .create(id, spec, port)
            .await
            .map_err(|e| e.to_string())?;
        if let Some(s) = self.sandboxes.write().get_mut(&id) {
            s.phase = Phase::Probing;
        }
        let addr = SocketAddr::new(IpAddr::V4(self.record.ip), port);
        let deadline = tokio::time::Instant::now() + self.cfg.worker.readiness_timeout;
        loop {
            if self.probe_once(addr).await {
                return Ok(());
            }
            if tokio::time::Instant::now() >= deadline {
                return Err("readiness probe timed out".into());
            }
            tokio::time::sleep(self.cfg.worker.probe_interval).await;
        }
    }

    async fn probe_once(&self, addr: SocketAddr) -> bool {
        match self.probe {
            Probe::Connect => {
                matches!(
                    tokio::time::timeout(Duration::from_millis(200), TcpStream::connect(addr))
                        .await,
                    Ok(Ok(_))
                )
            }
            Probe::Http => matches!(
                self.probe_client.get(format!("http://{addr}/health")).send().await,
                Ok(r) if r.status().is_success()
            ),
        }
    }

    async fn kill(&self, id: u64) -> WorkerResponse {
        let removed = self.sandboxes.write().remove(&id);
        match removed {
            None => {}
            Some(s) if s.phase == Phase::Ready => {
                let _ = self.runtime.kill(id).await;
                self.ports.release(id);
            }
            // The bring-up task owns the teardown of unfinished sandboxes.
            Some(s) => s.cancel.cancel(),
        }
        WorkerResponse::Ack
    }

    fn list(&self) -> Vec<ListedSandbox> {
        let mut out: Vec<ListedSandbox> = self
            .sandboxes
            .read()
            .values()
            .filter(|s| s.phase == Phase::Ready)
            .map(|s| ListedSandbox {
                function: s.function.clone(),
                record: s.record,
            })
            .collect();
        out.sort_by_key(|s| s.record.id);
        out
    }

    fn usage(&self) -> WorkerUsage {
        let sandboxes = self.sandboxes.read();
        WorkerUsage {
            cpu_committed: sandboxes.values().map(|s| s.cpu).sum(),
            mem_committed: sandboxes.values().map(|s| s.mem).sum(),
            sandboxes: sandboxes.len() as u32,
        }
    }

    async fn report_failure(&self, function: &str, id: u64, reason: &str) {
        let Some(index) = self.index() else { return };
        let req = CpRequest::SandboxFailed {
            worker_index: index,
            function: function.to_string(),
            sandbox_id: id,
            reason: reason.to_string(),
        };
        if let Err(e) = self.cp.call_within(&req, Duration::from_secs(5)).await {
            debug!(sandbox = id, "failure report failed: {e}");
        }
    }

    async fn on_exit(&self, id: u64) {
        let crashed = {
            let mut sandboxes = self.sandboxes.write();
            match sandboxes.get(&id).map(|s| s.phase) {
                Some(Phase::Ready) => sandboxes.remove(&id),
                Some(_) => {
                    // Still starting: let the bring-up task report it.
                    if let Some(s) = sandboxes.get(&id) {
                        s.cancel.cancel();
                    }
                    None
                }
                None => None,
            }
        };
        if let Some(s) = crashed {
            warn!(sandbox = id, function = %s.function, "sandbox crashed");
            self.ports.release(id);
            self.report_failure(&s.function, id, "sandbox process exited")
                .await;
        }
    }

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
                Ok(CpResponse::Registered { index, .. }) => {
                    let previous = self.index.swap(index as u32, Ordering::AcqRel);
                    if previous != UNREGISTERED && previous != index as u32 {
                        warn!(previous, index, "control plane assigned a new worker index");
                    }
                    info!(index, "worker registered");
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

    async fn heartbeat_loop(self: Arc<Self>) {
        self.register().await;
        let period = self.cfg.control.heartbeat_interval;
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = self.cancel.cancelled() => return,
            }
            let req = CpRequest::Heartbeat {
                record: self.record.clone(),
                usage: Some(self.usage()),
            };
            match self.cp.call_within(&req, period).await {
                Ok(CpResponse::Reregister) => self.register().await,
                Ok(_) => {}
                // Sandboxes keep running while the control plane is away.
                Err(e) => debug!("heartbeat failed: {e}"),
            }
        }
    }

    async fn exit_loop(self: Arc<Self>, mut exits: mpsc::UnboundedReceiver<u64>) {
        loop {
            let id = tokio::select! {
                id = exits.recv() => match id { Some(id) => id, None => return },
                _ = self.cancel.cancelled() => return,
            };
            self.on_exit(id).await;
        }
    }
}

/// Handle to a running worker daemon.
pub struct Worker {
    inner: Arc<Inner>,
    addr: SocketAddr,
}

impl Worker {
    /// Starts a daemon with the runtime selected by `cfg.worker.runtime`.
    pub async fn start(cfg: Config, listener: TcpListener) -> anyhow::Result<Self> {
        let log = match &cfg.worker.exec_log {
            Some(path) => Some(Arc::new(ExecLog::open(path)?)),
            None => None,
        };
        let (tx, rx) = mpsc::unbounded_channel();
        let (runtime, probe): (Arc<dyn Runtime>, Probe) = match cfg.worker.runtime {
            RuntimeKind::Stub => (
                Arc::new(StubRuntime::new(
                    cfg.worker.stub_delay,
                    IpAddr::V4(cfg.node.advertise),
                    log,
                )),
                Probe::Connect,
            ),
            RuntimeKind::Process => {
                let bin = match &cfg.worker.sandbox_bin {
                    Some(b) => b.clone(),
                    None => std::env::current_exe()?,
                };
                (
                    Arc::new(ProcessRuntime::new(
                        bin,
                        cfg.worker.exec_log.clone(),
                        tx.clone(),
                    )),
                    Probe::Http,
                )
            }
        };
        Self::with_runtime(cfg, listener, runtime, probe, tx, rx).await
    }

    /// Starts a daemon over an arbitrary runtime. Ids sent on `exits` are
    /// treated as sandbox exits.
    pub async fn with_runtime(
        cfg: Config,
        listener: TcpListener,
        runtime: Arc<dyn Runtime>,
        probe: Probe,
        _exit_sink: ExitSink,
        exits: mpsc::UnboundedReceiver<u64>,
    ) -> anyhow::Result<Self> {
        let addr = listener.local_addr()?;
        anyhow::ensure!(
            !cfg.control.replicas.is_empty(),
            "no control plane replicas configured"
        );
        let (lo, hi) = cfg.worker.port_range;
        anyhow::ensure!(lo <= hi, "empty port range {lo}-{hi}");
        let name = if cfg.node.name.is_empty() {
            format!("worker-{}", addr.port())
        } else {
            cfg.node.name.clone()
        };
        let record = ComponentRecord::worker(
            name,
            cfg.node.advertise,
            addr.port(),
            cfg.worker.cpu_capacity,
            cfg.worker.mem_capacity,
        );
        let probe_client = reqwest::Client::builder()
            .pool_max_idle_per_host(0)
            .connect_timeout(Duration::from_millis(200))
            .timeout(Duration::from_millis(500))
            .build()?;
        let cancel = CancellationToken::new();
        let inner = Arc::new(Inner {
            record,
            runtime,
            probe,
            ports: PortPool::new(lo, hi),
            creates: Semaphore::new(cfg.worker.parallel_creates.max(1)),
            sandboxes: RwLock::new(HashMap::new()),
            index: AtomicU32::new(UNREGISTERED),
            cp: LeaderClient::new(
                RpcClient::new(Duration::from_secs(2)),
                cfg.control.replicas.clone(),
            ),
            probe_client,
            cancel: cancel.clone(),
            cfg,
        });
        let rpc_state = inner.clone();
        let app = rpc_route(move |req: WorkerRequest, leader: Option<String>| {
            let s = rpc_state.clone();
            async move {
                if let Some(l) = leader {
                    s.cp.set_leader(&l);
                }
                match req {
                    WorkerRequest::CreateSandbox { sandbox_id, spec } => s.create(sandbox_id, spec),
                    WorkerRequest::KillSandbox { sandbox_id } => s.kill(sandbox_id).await,
                    WorkerRequest::ListSandboxes => WorkerResponse::Sandboxes(s.list()),
                }
            }
        })
        .merge(
            Router::new()
                .route("/health", get(|| async { "ok" }))
                .route("/metrics", get(metrics))
                .with_state(inner.clone()),
        );
        let serve_cancel = cancel.clone();
        tokio::spawn(async move {
            let shutdown = async move { serve_cancel.cancelled().await };
            if let Err(e) = axum::serve(listener, app)
                .tcp_nodelay(true)
                .with_graceful_shutdown(shutdown)
                .await
            {
                warn!("worker server stopped: {e}");
            }
        });
        tokio::spawn(inner.clone().heartbeat_loop());
        tokio::spawn(inner.clone().exit_loop(exits));
        info!(%addr, "worker daemon started");
        Ok(Self { inner, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn index(&self) -> Option<u16> {
        self.inner.index()
    }

    /// Ready sandboxes, as reported to the control plane.
    pub fn list(&self) -> Vec<ListedSandbox> {
        self.inner.list()
    }

    pub fn phase(&self, id: u64) -> Option<Phase> {
        self.inner.sandboxes.read().get(&id).map(|s| s.phase)
    }

    pub fn ports(&self) -> &PortPool {
        &self.inner.ports
    }

    pub fn usage(&self) -> WorkerUsage {
        self.inner.usage()
    }

    /// Stops serving and kills every sandbox.
    pub async fn shutdown(&self) {
        self.inner.cancel.cancel();
        let ids: Vec<u64> = self.inner.sandboxes.read().keys().copied().collect();
        for id in ids {
            self.inner.kill(id).await;
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.inner.cancel.cancel();
    }
}

async fn metrics(axum::extract::State(inner): axum::extract::State<Arc<Inner>>) -> String {
    let mut out = MetricsText::new();
    let usage = inner.usage();
    if let Some(i) = inner.index() {
        out.global("worker_index", i);
    }
    out.global("sandboxes", usage.sandboxes);
    out.global("sandboxes_ready", inner.list().len());
    out.global("cpu_committed", usage.cpu_committed);
    out.global("mem_committed", usage.mem_committed);
    out.global("ports_free", inner.ports.free());
    out.global("ports_leased", inner.ports.leased());
    out.finish()
}
