//! Control plane replica: store, election watcher, RPC and HTTP endpoints.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::get;
use axum::{Json, Router};
use parking_lot::RwLock;
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use baton_core::config::Config;
use baton_core::metrics::MetricsText;
use baton_core::rpc::{rpc_route, RpcClient};
use baton_core::wire::{CpRequest, CpResponse, CpStatus, ErrorCode, Failure};
use baton_store::{Replica, ReplicaConfig, Role};

use crate::leader::{Context, Leadership};
use crate::transport::RpcPeers;

struct Shared {
    ctx: Arc<Context>,
    replica_id: usize,
    replicas: Vec<String>,
    leadership: RwLock<Option<Arc<Leadership>>>,
    terms_led: AtomicU64,
}

impl Shared {
    fn leader_hint(&self) -> Option<String> {
        self.ctx
            .store
            .state()
            .leader
            .and_then(|l| self.replicas.get(l as usize).cloned())
    }

    fn current(&self) -> Option<Arc<Leadership>> {
        self.leadership.read().clone()
    }

    fn status(&self) -> CpStatus {
        let st = self.ctx.store.state();
        let lead = self.current();
        CpStatus {
            replica_id: self.replica_id,
            term: st.term,
            leader: self.leader_hint(),
            is_leader: st.role == Role::Leader,
            operational: lead.is_some_and(|l| l.operational()),
            store_writes: self.ctx.store.write_count(),
        }
    }

    async fn handle(self: Arc<Self>, req: CpRequest) -> CpResponse {
        match req {
            CpRequest::RequestVote(v) => return CpResponse::Vote(self.ctx.store.handle_vote(v)),
            CpRequest::AppendEntries(a) => {
                return match self.ctx.store.handle_append(a) {
                    Ok(r) => CpResponse::Append(r),
                    Err(e) => {
                        CpResponse::Error(Failure::new(ErrorCode::Unavailable, e.to_string()))
                    }
                }
            }
            CpRequest::Status => return CpResponse::Status(self.status()),
            _ => {}
        }
        let Some(lead) = self.current() else {
            return CpResponse::Error(Failure::not_leader(self.leader_hint()));
        };
        if !lead.operational() {
            return CpResponse::Error(Failure::new(ErrorCode::Unavailable, "leader is recovering"));
        }
        match req {
            CpRequest::RegisterFunction(spec) => lead.register_function(spec).await,
            CpRequest::DeregisterFunction { name } => lead.deregister_function(&name).await,
            CpRequest::RegisterComponent(record) => lead.register_component(record).await,
            CpRequest::DeregisterComponent(record) => lead.deregister_component(record).await,
            CpRequest::ListFunctions => CpResponse::Functions(lead.snapshots()),
            CpRequest::Metrics { samples, .. } => {
                lead.ingest(samples);
                CpResponse::Ack
            }
            CpRequest::Heartbeat { record, usage } => lead.heartbeat(record, usage),
            CpRequest::SandboxReady {
                worker_index,
                function,
                record,
            } => lead.sandbox_ready(worker_index, &function, record).await,
            CpRequest::SandboxFailed {
                worker_index,
                function,
                sandbox_id,
                reason,
            } => lead.sandbox_failed(worker_index, &function, sandbox_id, &reason),
            CpRequest::RequestVote(_) | CpRequest::AppendEntries(_) | CpRequest::Status => {
                unreachable!()
            }
        }
    }

    /// Follows store leadership: builds a fresh [`Leadership`] on every
    /// won election and tears it down when the role is lost.
    async fn watch_role(self: Arc<Self>, cancel: CancellationToken) {
        let mut rx = self.ctx.store.subscribe();
        loop {
            let st = *rx.borrow_and_update();
            let current_term = self.current().map(|l| l.term);
            if st.role == Role::Leader && current_term != Some(st.term) {
                self.step_down();
                let lead = Leadership::new(st.term, self.ctx.clone());
                *self.leadership.write() = Some(lead.clone());
                self.terms_led.fetch_add(1, Ordering::Relaxed);
                info!(
                    replica = self.replica_id,
                    term = st.term,
                    "won election; recovering"
                );
                let me = self.clone();
                tokio::spawn(async move {
                    lead.recover().await;
                    drop(me);
                });
            } else if st.role != Role::Leader && current_term.is_some() {
                warn!(replica = self.replica_id, term = st.term, "lost leadership");
                self.step_down();
            }
            tokio::select! {
                r = rx.changed() => if r.is_err() { return },
                _ = cancel.cancelled() => {
                    self.step_down();
                    return;
                }
            }
        }
    }

    fn step_down(&self) {
        if let Some(old) = self.leadership.write().take() {
            old.cancel.cancel();
        }
    }
}

/// Handle to a running control plane replica.
pub struct ControlPlane {
    shared: Arc<Shared>,
    addr: SocketAddr,
    cancel: CancellationToken,
}

impl ControlPlane {
    /// Opens the store, joins the election and serves on `listener`.
    pub async fn start(mut cfg: Config, listener: TcpListener) -> anyhow::Result<Self> {
        let addr = listener.local_addr()?;
        if cfg.control.replicas.is_empty() {
            cfg.control.replicas = vec![addr.to_string()];
            cfg.node.replica_id = 0;
        }
        let replicas = cfg.control.replicas.clone();
        let replica_id = cfg.node.replica_id;
        anyhow::ensure!(
            replica_id < replicas.len(),
            "replica_id {replica_id} outside the replica list"
        );
        let self_addr = replicas[replica_id].clone();

        let peer_rpc = RpcClient::new(Duration::from_millis(500));
        let transport = Arc::new(RpcPeers::new(peer_rpc, replicas.clone()));
        let store_cfg = ReplicaConfig {
            id: replica_id as u64,
            members: (0..replicas.len() as u64).collect(),
            election_timeout_min: cfg.store.election_timeout_min,
            election_timeout_max: cfg.store.election_timeout_max,
            heartbeat_interval: cfg.store.election_heartbeat_interval,
            ack_mode: cfg.store.ack_mode,
            data_dir: cfg.store.data_dir.clone(),
            compaction_threshold: cfg.store.compaction_threshold,
            allow_sandboxes: cfg.store.persist_sandboxes,
            seed: cfg.node.seed,
        };
        let store = Replica::open(store_cfg, transport)?;
        let rpc = RpcClient::new(Duration::from_secs(5)).with_leader_tag(self_addr);
        let ctx = Arc::new(Context {
            cfg,
            store: store.clone(),
            rpc,
            metrics_dropped: AtomicU64::new(0),
        });
        let shared = Arc::new(Shared {
            ctx,
            replica_id,
            replicas,
            leadership: RwLock::new(None),
            terms_led: AtomicU64::new(0),
        });
        let cancel = CancellationToken::new();

        let handler_state = shared.clone();
        let app = rpc_route(move |req: CpRequest, _leader: Option<String>| {
            let s = handler_state.clone();
            async move { s.handle(req).await }
        })
        .merge(
            Router::new()
                .route("/metrics", get(metrics))
                .route("/sandboxes", get(sandboxes))
                .route("/health", get(|| async { "ok" }))
                .with_state(shared.clone()),
        );
        let serve_cancel = cancel.clone();
        tokio::spawn(async move {
            let shutdown = async move { serve_cancel.cancelled().await };
            if let Err(e) = axum::serve(listener, app)
                .tcp_nodelay(true)
                .with_graceful_shutdown(shutdown)
                .await
            {
                warn!("control plane server stopped: {e}");
            }
        });
        tokio::spawn(shared.clone().watch_role(cancel.clone()));
        store.start();
        info!(%addr, replica = replica_id, "control plane started");
        Ok(Self {
            shared,
            addr,
            cancel,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn status(&self) -> CpStatus {
        self.shared.status()
    }

    pub fn store(&self) -> &Arc<Replica> {
        &self.shared.ctx.store
    }

    pub fn metrics_dropped(&self) -> u64 {
        self.shared.ctx.metrics_dropped.load(Ordering::Relaxed)
    }

    pub fn shutdown(&self) {
        self.cancel.cancel();
        self.shared.ctx.store.stop();
    }
}

impl Drop for ControlPlane {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn metrics(State(shared): State<Arc<Shared>>) -> String {
    let mut out = MetricsText::new();
    let status = shared.status();
    out.global("is_leader", u8::from(status.is_leader));
    out.global("term", status.term);
    out.global("store_writes", status.store_writes);
    out.global(
        "metrics_dropped",
        shared.ctx.metrics_dropped.load(Ordering::Relaxed),
    );
    out.global("terms_led", shared.terms_led.load(Ordering::Relaxed));
    if let Some(lead) = shared.current() {
        out.global("operational", u8::from(lead.operational()));
        lead.render_metrics(&mut out);
    }
    out.finish()
}

/// Ready sandboxes per function as known to the leader.
async fn sandboxes(
    State(shared): State<Arc<Shared>>,
) -> Json<std::collections::BTreeMap<String, Vec<baton_core::SandboxRecord>>> {
    Json(shared.current().map(|l| l.ready_view()).unwrap_or_default())
}
