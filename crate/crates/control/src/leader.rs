//! State owned by one term of leadership.
//!
//! Everything here lives in memory and is rebuilt by [`Leadership::recover`]
//! when a replica wins an election. The only store writes happen on
//! (de)registration of functions and components, plus sandbox bookkeeping
//! when the persistence ablation is switched on.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::future::join_all;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use baton_core::config::Config;
use baton_core::metrics::MetricsText;
use baton_core::rpc::RpcClient;
use baton_core::time::monotonic_ms;
use baton_core::wire::{
    CpResponse, DpRequest, DpResponse, ErrorCode, Failure, FeRequest, FeResponse, FunctionSnapshot,
    ListedSandbox, Namespace, WorkerRequest, WorkerResponse, WorkerUsage,
};
use baton_core::{
    ComponentKind, ComponentRecord, EndpointSet, FunctionSpec, MetricsSample, SandboxRecord,
};
use baton_store::{Replica, StoreError};

use crate::autoscale::Autoscaler;
use crate::placer::{place, Candidate};

const RPC_BUDGET: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerStatus {
    Healthy,
    Suspect,
    Dead,
}

/// Value stored under the worker's address in `WorkerNodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorkerEntry {
    index: u16,
    record: ComponentRecord,
}

struct WorkerState {
    record: ComponentRecord,
    last_heartbeat: Instant,
    cpu_committed: u32,
    mem_committed: u32,
    status: WorkerStatus,
    needs_merge: bool,
    usage: Option<WorkerUsage>,
}

impl WorkerState {
    fn new(record: ComponentRecord) -> Self {
        Self {
            record,
            last_heartbeat: Instant::now(),
            cpu_committed: 0,
            mem_committed: 0,
            status: WorkerStatus::Healthy,
            needs_merge: false,
            usage: None,
        }
    }

    fn commit(&mut self, cpu: u32, mem: u32) {
        self.cpu_committed = self.cpu_committed.saturating_add(cpu);
        self.mem_committed = self.mem_committed.saturating_add(mem);
    }

    fn release(&mut self, cpu: u32, mem: u32) {
        self.cpu_committed = self.cpu_committed.saturating_sub(cpu);
        self.mem_committed = self.mem_committed.saturating_sub(mem);
    }
}

struct FunctionState {
    spec: FunctionSpec,
    scaler: Autoscaler,
    ready: BTreeMap<u64, SandboxRecord>,
    /// Creation requested, not yet reported ready: id -> worker index.
    pending: BTreeMap<u64, u16>,
    version: u64,
    creates: u64,
    kills: u64,
}

impl FunctionState {
    fn endpoint_set(&mut self, version: u64) -> EndpointSet {
        self.version = version;
        EndpointSet {
            function: self.spec.name.clone(),
            version,
            endpoints: self.ready.values().copied().collect(),
        }
    }

    fn snapshot(&self) -> FunctionSnapshot {
        FunctionSnapshot {
            spec: self.spec.clone(),
            endpoints: (self.version > 0).then(|| EndpointSet {
                function: self.spec.name.clone(),
                version: self.version,
                endpoints: self.ready.values().copied().collect(),
            }),
        }
    }
}

/// Coalescing endpoint-update queue for one data plane.
struct Broadcaster {
    addr: String,
    alive: AtomicBool,
    pending: Mutex<HashMap<String, EndpointSet>>,
    notify: Notify,
}

impl Broadcaster {
    fn push(&self, set: EndpointSet) {
        if !self.alive.load(Ordering::Relaxed) {
            return;
        }
        let mut p = self.pending.lock();
        match p.get(&set.function) {
            Some(old) if old.version >= set.version => {}
            _ => {
                p.insert(set.function.clone(), set);
            }
        }
        drop(p);
        self.notify.notify_one();
    }

    async fn run(self: Arc<Self>, rpc: RpcClient, cancel: CancellationToken) {
        loop {
            tokio::select! {
                _ = self.notify.notified() => {}
                _ = cancel.cancelled() => return,
            }
            loop {
                let batch: Vec<EndpointSet> = self.pending.lock().drain().map(|(_, s)| s).collect();
                if batch.is_empty() {
                    break;
                }
                let req = DpRequest::UpdateEndpoints(batch.clone());
                match rpc.call::<_, DpResponse>(&self.addr, &req).await {
                    Ok(_) => {}
                    Err(e) => {
                        debug!(dp = %self.addr, "endpoint broadcast failed: {e}");
                        for set in batch {
                            self.push(set);
                        }
                        tokio::select! {
                            _ = tokio::time::sleep(Duration::from_millis(100)) => {}
                            _ = cancel.cancelled() => return,
                        }
                    }
                }
            }
        }
    }
}

struct DpState {
    record: ComponentRecord,
    last_heartbeat: Instant,
    out: Arc<Broadcaster>,
}

/// Shared, process-wide handles a leadership term needs.
pub(crate) struct Context {
    pub cfg: Config,
    pub store: Arc<Replica>,
    pub rpc: RpcClient,
    pub metrics_dropped: AtomicU64,
}

pub(crate) struct Leadership {
    pub term: u64,
    pub cancel: CancellationToken,
    operational: AtomicBool,
    ctx: Arc<Context>,
    functions: RwLock<HashMap<String, Arc<RwLock<FunctionState>>>>,
    workers: RwLock<BTreeMap<u16, WorkerState>>,
    dataplanes: RwLock<HashMap<String, DpState>>,
    sandbox_seq: AtomicU64,
    version_seq: AtomicU64,
    dirty: Mutex<HashSet<String>>,
    wake: Notify,
    killed: Mutex<HashSet<u64>>,
    registry: tokio::sync::Mutex<()>,
}

fn store_failure(store: &Replica, e: StoreError, replicas: &[String]) -> Failure {
    match e {
        StoreError::NotLeader { leader } => {
            Failure::not_leader(leader.and_then(|l| replicas.get(l as usize).cloned()))
        }
        StoreError::Io(err) => {
            warn!("store unusable, abdicating: {err}");
            store.abdicate();
            Failure::new(ErrorCode::Unavailable, "store failure")
        }
        other => Failure::new(ErrorCode::Unavailable, other.to_string()),
    }
}

impl Leadership {
    pub fn new(term: u64, ctx: Arc<Context>) -> Arc<Self> {
        Arc::new(Self {
            term,
            cancel: CancellationToken::new(),
            operational: AtomicBool::new(false),
            ctx,
            functions: RwLock::new(HashMap::new()),
            workers: RwLock::new(BTreeMap::new()),
            dataplanes: RwLock::new(HashMap::new()),
            sandbox_seq: AtomicU64::new(0),
            version_seq: AtomicU64::new(0),
            dirty: Mutex::new(HashSet::new()),
            wake: Notify::new(),
            killed: Mutex::new(HashSet::new()),
            registry: tokio::sync::Mutex::new(()),
        })
    }

    pub fn operational(&self) -> bool {
        self.operational.load(Ordering::Acquire)
    }

    /// Sandbox ids and endpoint versions carry the term in their upper 32
    /// bits, so they keep increasing across leader changes without being
    /// persisted.
    fn next_sandbox_id(&self) -> u64 {
        (self.term << 32) | (self.sandbox_seq.fetch_add(1, Ordering::Relaxed) + 1)
    }

    fn next_version(&self) -> u64 {
        (self.term << 32) | (self.version_seq.fetch_add(1, Ordering::Relaxed) + 1)
    }

    fn persist_sandboxes(&self) -> bool {
        self.ctx.cfg.store.persist_sandboxes
    }

    fn function(&self, name: &str) -> Option<Arc<RwLock<FunctionState>>> {
        self.functions.read().get(name).cloned()
    }

    fn new_function(&self, spec: FunctionSpec) -> FunctionState {
        let scaler = Autoscaler::new(&spec.sched, self.ctx.cfg.control.metrics_bucket);
        FunctionState {
            spec,
            scaler,
            ready: BTreeMap::new(),
            pending: BTreeMap::new(),
            version: 0,
            creates: 0,
            kills: 0,
        }
    }

    fn mark_dirty(&self, name: &str, wake: bool) {
        self.dirty.lock().insert(name.to_string());
        if wake {
            self.wake.notify_one();
        }
    }

    fn broadcast(&self, set: EndpointSet) {
        for dp in self.dataplanes.read().values() {
            dp.out.push(set.clone());
        }
    }

    fn live_dataplanes(&self) -> Vec<String> {
        self.dataplanes
            .read()
            .values()
            .filter(|d| d.out.alive.load(Ordering::Relaxed))
            .map(|d| d.record.address())
            .collect()
    }

    async fn send_to_dataplanes(&self, req: DpRequest) {
        let targets = self.live_dataplanes();
        let calls = targets.iter().map(|addr| {
            let rpc = &self.ctx.rpc;
            let req = &req;
            async move {
                match tokio::time::timeout(RPC_BUDGET, rpc.call::<_, DpResponse>(addr, req)).await {
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => debug!(dp = %addr, "data plane update failed: {e}"),
                    Err(_) => debug!(dp = %addr, "data plane update timed out"),
                }
            }
        });
        join_all(calls).await;
    }

    fn notify_frontends(&self, req: FeRequest) {
        for fe in self.ctx.cfg.control.frontends.clone() {
            let rpc = self.ctx.rpc.clone();
            let req = req.clone();
            tokio::spawn(async move {
                if let Err(e) = rpc.call::<_, FeResponse>(&fe, &req).await {
                    debug!(frontend = %fe, "front-end notification failed: {e}");
                }
            });
        }
    }

    fn add_dataplane(self: &Arc<Self>, record: ComponentRecord) {
        let addr = record.address();
        let mut dps = self.dataplanes.write();
        if let Some(dp) = dps.get_mut(&addr) {
            dp.record = record;
            dp.last_heartbeat = Instant::now();
            dp.out.alive.store(true, Ordering::Relaxed);
            return;
        }
        let out = Arc::new(Broadcaster {
            addr: addr.clone(),
            alive: AtomicBool::new(true),
            pending: Mutex::new(HashMap::new()),
            notify: Notify::new(),
        });
        tokio::spawn(out.clone().run(self.ctx.rpc.clone(), self.cancel.clone()));
        dps.insert(
            addr,
            DpState {
                record,
                last_heartbeat: Instant::now(),
                out,
            },
        );
    }

    // ---- recovery ----

    /// Rebuilds state from the store and workers. Returns once the replica
    /// can serve requests; sandbox lists are merged in the background.
    pub async fn recover(self: &Arc<Self>) {
        let started = Instant::now();
        let store = &self.ctx.store;
        for (_, value) in store.scan(Namespace::DataPlanes) {
            match serde_json::from_slice::<ComponentRecord>(&value) {
                Ok(record) => self.add_dataplane(record),
                Err(e) => warn!("skipping unreadable data plane entry: {e}"),
            }
        }
        for (_, value) in store.scan(Namespace::WorkerNodes) {
            match serde_json::from_slice::<WorkerEntry>(&value) {
                Ok(entry) => {
                    self.workers
                        .write()
                        .insert(entry.index, WorkerState::new(entry.record));
                }
                Err(e) => warn!("skipping unreadable worker entry: {e}"),
            }
        }

        let suppress_until = monotonic_ms();
        let mut specs = Vec::new();
        for (_, value) in store.scan(Namespace::Functions) {
            match serde_json::from_slice::<FunctionSpec>(&value) {
                Ok(spec) => {
                    let mut st = self.new_function(spec.clone());
                    st.scaler.suppress_downscale_until(
                        suppress_until + spec.sched.stable_window.as_millis() as u64,
                    );
                    self.functions
                        .write()
                        .insert(spec.name.clone(), Arc::new(RwLock::new(st)));
                    specs.push(spec);
                }
                Err(e) => warn!("skipping unreadable function entry: {e}"),
            }
        }
        self.send_to_dataplanes(DpRequest::SyncFunctions(specs))
            .await;
        self.operational.store(true, Ordering::Release);
        info!(
            term = self.term,
            functions = self.functions.read().len(),
            workers = self.workers.read().len(),
            dataplanes = self.dataplanes.read().len(),
            elapsed_ms = started.elapsed().as_millis() as u64,
            "leader operational"
        );

        let indices: Vec<u16> = self.workers.read().keys().copied().collect();
        let merges: Vec<_> = indices
            .into_iter()
            .map(|idx| {
                let me = self.clone();
                tokio::spawn(async move { me.fetch_and_merge(idx).await })
            })
            .collect();
        let me = self.clone();
        tokio::spawn(async move {
            let _ = tokio::time::timeout(Duration::from_secs(1), join_all(merges)).await;
            tokio::spawn(me.clone().health_loop());
            me.reconcile_loop().await;
        });
    }

    async fn fetch_and_merge(self: Arc<Self>, index: u16) {
        let Some(addr) = self.workers.read().get(&index).map(|w| w.record.address()) else {
            return;
        };
        let result = tokio::time::timeout(
            RPC_BUDGET,
            self.ctx
                .rpc
                .call::<_, WorkerResponse>(&addr, &WorkerRequest::ListSandboxes),
        )
        .await;
        match result {
            Ok(Ok(WorkerResponse::Sandboxes(list))) => {
                if let Some(w) = self.workers.write().get_mut(&index) {
                    w.needs_merge = false;
                }
                self.merge_worker(index, list);
            }
            other => {
                debug!(worker = %addr, "sandbox listing failed: {other:?}");
                if let Some(w) = self.workers.write().get_mut(&index) {
                    if w.status == WorkerStatus::Healthy {
                        w.status = WorkerStatus::Suspect;
                    }
                    w.needs_merge = true;
                }
            }
        }
    }

    /// Makes this leader's view of worker `index` equal to `list` (pending
    /// creations aside): unknown sandboxes of registered functions are
    /// adopted, those of unknown functions are killed, and sandboxes the
    /// worker no longer runs are dropped.
    fn merge_worker(&self, index: u16, list: Vec<ListedSandbox>) {
        let listed: HashSet<u64> = list.iter().map(|s| s.record.id).collect();
        let mut doomed = Vec::new();
        let mut touched: HashSet<String> = HashSet::new();
        for item in &list {
            if self.killed.lock().contains(&item.record.id) {
                doomed.push(item.record.id);
                continue;
            }
            let Some(f) = self.function(&item.function) else {
                doomed.push(item.record.id);
                continue;
            };
            let mut st = f.write();
            if st.ready.contains_key(&item.record.id) {
                continue;
            }
            let was_pending = st.pending.remove(&item.record.id).is_some();
            if !was_pending {
                if let Some(w) = self.workers.write().get_mut(&index) {
                    w.commit(st.spec.sched.cpu_request, st.spec.sched.mem_request);
                }
            }
            st.ready.insert(item.record.id, item.record);
            touched.insert(item.function.clone());
        }
        let functions: Vec<_> = self.functions.read().values().cloned().collect();
        for f in functions {
            let mut st = f.write();
            let gone: Vec<u64> = st
                .ready
                .iter()
                .filter(|(id, r)| r.worker_index == index && !listed.contains(id))
                .map(|(id, _)| *id)
                .collect();
            if gone.is_empty() {
                continue;
            }
            for id in gone {
                st.ready.remove(&id);
                if let Some(w) = self.workers.write().get_mut(&index) {
                    w.release(st.spec.sched.cpu_request, st.spec.sched.mem_request);
                }
            }
            touched.insert(st.spec.name.clone());
        }
        for name in &touched {
            if let Some(f) = self.function(name) {
                let set = f.write().endpoint_set(self.next_version());
                self.broadcast(set);
            }
            self.mark_dirty(name, false);
        }
        if !doomed.is_empty() {
            if let Some(addr) = self.workers.read().get(&index).map(|w| w.record.address()) {
                for id in doomed {
                    self.spawn_kill(addr.clone(), id);
                }
            }
        }
        debug!(
            worker = index,
            sandboxes = list.len(),
            "merged worker sandbox list"
        );
    }

    // ---- registration ----

    pub async fn register_function(&self, spec: FunctionSpec) -> CpResponse {
        if let Err(e) = spec.validate() {
            return CpResponse::Error(Failure::new(ErrorCode::Invalid, e.to_string()));
        }
        let _guard = self.registry.lock().await;
        if let Some(f) = self.function(&spec.name) {
            return if f.read().spec == spec {
                CpResponse::Ack
            } else {
                CpResponse::Error(Failure::new(
                    ErrorCode::Conflict,
                    format!(
                        "function {} already registered with a different spec",
                        spec.name
                    ),
                ))
            };
        }
        let bytes = serde_json::to_vec(&spec).expect("spec serializes");
        if let Err(e) = self
            .ctx
            .store
            .put(Namespace::Functions, &spec.name, bytes)
            .await
        {
            return CpResponse::Error(store_failure(
                &self.ctx.store,
                e,
                &self.ctx.cfg.control.replicas,
            ));
        }
        let st = self.new_function(spec.clone());
        self.functions
            .write()
            .insert(spec.name.clone(), Arc::new(RwLock::new(st)));
        self.send_to_dataplanes(DpRequest::AddFunction(spec.clone()))
            .await;
        self.mark_dirty(&spec.name, true);
        CpResponse::Ack
    }

    pub async fn deregister_function(&self, name: &str) -> CpResponse {
        let _guard = self.registry.lock().await;
        let Some(f) = self.function(name) else {
            return CpResponse::Error(Failure::new(
                ErrorCode::NotFound,
                format!("no function {name}"),
            ));
        };
        if let Err(e) = self.ctx.store.delete(Namespace::Functions, name).await {
            return CpResponse::Error(store_failure(
                &self.ctx.store,
                e,
                &self.ctx.cfg.control.replicas,
            ));
        }
        self.functions.write().remove(name);
        self.send_to_dataplanes(DpRequest::RemoveFunction {
            name: name.to_string(),
        })
        .await;
        let victims: Vec<(u64, u16)> = {
            let mut st = f.write();
            let mut v: Vec<_> = st
                .ready
                .iter()
                .map(|(id, r)| (*id, r.worker_index))
                .collect();
            v.extend(st.pending.iter().map(|(id, w)| (*id, *w)));
            st.ready.clear();
            st.pending.clear();
            let (cpu, mem) = (st.spec.sched.cpu_request, st.spec.sched.mem_request);
            let mut workers = self.workers.write();
            for (_, w) in &v {
                if let Some(w) = workers.get_mut(w) {
                    w.release(cpu, mem);
                }
            }
            v
        };
        for (id, w) in victims {
            if let Some(addr) = self.workers.read().get(&w).map(|w| w.record.address()) {
                self.spawn_kill(addr, id);
            }
        }
        CpResponse::Ack
    }

    pub async fn register_component(self: &Arc<Self>, record: ComponentRecord) -> CpResponse {
        let _guard = self.registry.lock().await;
        let key = record.key();
        let store = &self.ctx.store;
        let replicas = &self.ctx.cfg.control.replicas;
        match record.kind {
            ComponentKind::DataPlane => {
                let known = self.dataplanes.read().get(&key).map(|d| d.record.clone());
                if known.as_ref() != Some(&record) {
                    let bytes = serde_json::to_vec(&record).expect("record serializes");
                    if let Err(e) = store.put(Namespace::DataPlanes, &key, bytes).await {
                        return CpResponse::Error(store_failure(store, e, replicas));
                    }
                }
                self.add_dataplane(record);
                self.notify_frontends(FeRequest::AddReplica { address: key });
                CpResponse::Registered {
                    index: 0,
                    functions: self.snapshots(),
                }
            }
            ComponentKind::WorkerNode => {
                let existing = self
                    .workers
                    .read()
                    .iter()
                    .find(|(_, w)| w.record.key() == key)
                    .map(|(i, w)| (*i, w.record.clone()));
                let index = match existing {
                    Some((_, old)) if old.name != record.name => {
                        return CpResponse::Error(Failure::new(
                            ErrorCode::Conflict,
                            format!("{key} already registered as worker {}", old.name),
                        ));
                    }
                    Some((index, old)) => {
                        if old != record {
                            let entry = WorkerEntry {
                                index,
                                record: record.clone(),
                            };
                            let bytes = serde_json::to_vec(&entry).expect("entry serializes");
                            if let Err(e) = store.put(Namespace::WorkerNodes, &key, bytes).await {
                                return CpResponse::Error(store_failure(store, e, replicas));
                            }
                        }
                        let mut workers = self.workers.write();
                        let w = workers.get_mut(&index).expect("worker present");
                        w.record = record;
                        w.last_heartbeat = Instant::now();
                        w.status = WorkerStatus::Healthy;
                        index
                    }
                    None => {
                        let index = {
                            let workers = self.workers.read();
                            (0..=u16::MAX).find(|i| !workers.contains_key(i))
                        };
                        let Some(index) = index else {
                            return CpResponse::Error(Failure::new(
                                ErrorCode::Rejected,
                                "worker registry full",
                            ));
                        };
                        let entry = WorkerEntry {
                            index,
                            record: record.clone(),
                        };
                        let bytes = serde_json::to_vec(&entry).expect("entry serializes");
                        if let Err(e) = store.put(Namespace::WorkerNodes, &key, bytes).await {
                            return CpResponse::Error(store_failure(store, e, replicas));
                        }
                        self.workers.write().insert(index, WorkerState::new(record));
                        index
                    }
                };
                // A re-registering worker may have restarted without its sandboxes.
                let me = self.clone();
                tokio::spawn(async move { me.fetch_and_merge(index).await });
                self.wake_all();
                CpResponse::Registered {
                    index,
                    functions: Vec::new(),
                }
            }
        }
    }

    pub async fn deregister_component(&self, record: ComponentRecord) -> CpResponse {
        let _guard = self.registry.lock().await;
        let key = record.key();
        let ns = match record.kind {
            ComponentKind::DataPlane => Namespace::DataPlanes,
            ComponentKind::WorkerNode => Namespace::WorkerNodes,
        };
        if let Err(e) = self.ctx.store.delete(ns, &key).await {
            return CpResponse::Error(store_failure(
                &self.ctx.store,
                e,
                &self.ctx.cfg.control.replicas,
            ));
        }
        match record.kind {
            ComponentKind::DataPlane => {
                if let Some(dp) = self.dataplanes.write().remove(&key) {
                    dp.out.alive.store(false, Ordering::Relaxed);
                }
                self.notify_frontends(FeRequest::RemoveReplica { address: key });
            }
            ComponentKind::WorkerNode => {
                let index = self
                    .workers
                    .read()
                    .iter()
                    .find(|(_, w)| w.record.key() == key)
                    .map(|(i, _)| *i);
                if let Some(index) = index {
                    self.drop_worker_sandboxes(index);
                    self.workers.write().remove(&index);
                }
            }
        }
        CpResponse::Ack
    }

    pub fn snapshots(&self) -> Vec<FunctionSnapshot> {
        let functions: Vec<_> = self.functions.read().values().cloned().collect();
        let mut out: Vec<_> = functions.iter().map(|f| f.read().snapshot()).collect();
        out.sort_by(|a, b| a.spec.name.cmp(&b.spec.name));
        out
    }

    // ---- heartbeats and health ----

    pub fn heartbeat(
        self: &Arc<Self>,
        record: ComponentRecord,
        usage: Option<WorkerUsage>,
    ) -> CpResponse {
        let key = record.key();
        match record.kind {
            ComponentKind::DataPlane => {
                let revived = {
                    let mut dps = self.dataplanes.write();
                    let Some(dp) = dps.get_mut(&key) else {
                        return CpResponse::Reregister;
                    };
                    dp.last_heartbeat = Instant::now();
                    !dp.out.alive.swap(true, Ordering::Relaxed)
                };
                if revived {
                    info!(dp = %key, "data plane is back");
                    self.notify_frontends(FeRequest::AddReplica {
                        address: key.clone(),
                    });
                    let me = self.clone();
                    tokio::spawn(async move { me.resync_dataplane(key).await });
                }
            }
            ComponentKind::WorkerNode => {
                let merge = {
                    let mut workers = self.workers.write();
                    let Some((index, w)) = workers.iter_mut().find(|(_, w)| w.record.key() == key)
                    else {
                        return CpResponse::Reregister;
                    };
                    w.last_heartbeat = Instant::now();
                    w.usage = usage;
                    let merge = w.status == WorkerStatus::Dead || w.needs_merge;
                    if w.status == WorkerStatus::Dead {
                        info!(worker = %key, "worker is back");
                    }
                    w.status = WorkerStatus::Healthy;
                    merge.then_some(*index)
                };
                if let Some(index) = merge {
                    let me = self.clone();
                    tokio::spawn(async move { me.fetch_and_merge(index).await });
                }
            }
        }
        CpResponse::Ack
    }

    async fn resync_dataplane(&self, addr: String) {
        let specs: Vec<FunctionSpec> = self.snapshots().into_iter().map(|s| s.spec).collect();
        let _ = tokio::time::timeout(
            RPC_BUDGET,
            self.ctx
                .rpc
                .call::<_, DpResponse>(&addr, &DpRequest::SyncFunctions(specs)),
        )
        .await;
        let sets: Vec<EndpointSet> = self
            .snapshots()
            .into_iter()
            .filter_map(|s| s.endpoints)
            .collect();
        if let Some(dp) = self.dataplanes.read().get(&addr) {
            for set in sets {
                dp.out.push(set);
            }
        }
    }

    async fn health_loop(self: Arc<Self>) {
        let control = &self.ctx.cfg.control;
        let timeout = control.failure_timeout();
        let mut tick =
            tokio::time::interval((control.heartbeat_interval / 4).max(Duration::from_millis(10)));
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = self.cancel.cancelled() => return,
            }
            let now = Instant::now();
            let mut dead_workers = Vec::new();
            for (index, w) in self.workers.write().iter_mut() {
                let silent = now.duration_since(w.last_heartbeat);
                if w.status != WorkerStatus::Dead && silent > timeout {
                    w.status = WorkerStatus::Dead;
                    w.needs_merge = true;
                    dead_workers.push(*index);
                } else if w.status == WorkerStatus::Healthy
                    && silent > control.heartbeat_interval * 2
                {
                    w.status = WorkerStatus::Suspect;
                }
            }
            for index in dead_workers {
                warn!(
                    worker = index,
                    "worker missed its heartbeats; dropping its sandboxes"
                );
                self.drop_worker_sandboxes(index);
            }
            let mut dead_dps = Vec::new();
            for (addr, dp) in self.dataplanes.read().iter() {
                if dp.out.alive.load(Ordering::Relaxed)
                    && now.duration_since(dp.last_heartbeat) > timeout
                {
                    dp.out.alive.store(false, Ordering::Relaxed);
                    dp.out.pending.lock().clear();
                    dead_dps.push(addr.clone());
                }
            }
            for addr in dead_dps {
                warn!(dp = %addr, "data plane missed its heartbeats");
                self.notify_frontends(FeRequest::RemoveReplica { address: addr });
            }
        }
    }

    fn drop_worker_sandboxes(&self, index: u16) {
        if let Some(w) = self.workers.write().get_mut(&index) {
            w.cpu_committed = 0;
            w.mem_committed = 0;
        }
        let functions: Vec<_> = self.functions.read().values().cloned().collect();
        for f in functions {
            let mut st = f.write();
            let before = st.ready.len();
            st.ready.retain(|_, r| r.worker_index != index);
            st.pending.retain(|_, w| *w != index);
            if st.ready.len() != before {
                let set = st.endpoint_set(self.next_version());
                self.broadcast(set);
            }
            let name = st.spec.name.clone();
            drop(st);
            self.mark_dirty(&name, false);
        }
        self.wake.notify_one();
    }

    fn wake_all(&self) {
        let names: Vec<String> = self.functions.read().keys().cloned().collect();
        self.dirty.lock().extend(names);
        self.wake.notify_one();
    }

    // ---- metrics and scaling ----

    pub fn ingest(&self, samples: Vec<MetricsSample>) {
        let now = monotonic_ms();
        let mut any = false;
        for s in samples {
            let Some(f) = self.function(&s.function) else {
                self.ctx.metrics_dropped.fetch_add(1, Ordering::Relaxed);
                debug!(function = %s.function, "dropping sample for unknown function");
                continue;
            };
            {
                let mut st = f.write();
                let cfg = st.spec.sched.clone();
                st.scaler.record(&cfg, now, s.inflight);
            }
            self.dirty.lock().insert(s.function);
            any = true;
        }
        if any {
            self.wake.notify_one();
        }
    }

    async fn reconcile_loop(self: Arc<Self>) {
        let mut tick = tokio::time::interval(self.ctx.cfg.control.reconcile_period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = tick.tick() => {
                    let names: Vec<String> = self.functions.read().keys().cloned().collect();
                    self.dirty.lock().extend(names);
                }
                _ = self.wake.notified() => {}
                _ = self.cancel.cancelled() => return,
            }
            let names: Vec<String> = self.dirty.lock().drain().collect();
            for name in names {
                self.reconcile(&name);
            }
        }
    }

    /// Evaluates the autoscaler and issues create/kill commands. Never
    /// touches the store unless the persistence ablation is on, and then
    /// only from the spawned command tasks.
    fn reconcile(self: &Arc<Self>, name: &str) {
        let Some(f) = self.function(name) else { return };
        let now = monotonic_ms();
        let mut creates = Vec::new();
        let mut kills = Vec::new();
        let mut set = None;
        let spec;
        {
            let mut st = f.write();
            spec = st.spec.clone();
            let ready = st.ready.len() as u32;
            let actual = ready + st.pending.len() as u32;
            let desired = st.scaler.evaluate(&spec.sched, now, ready, actual);
            let (cpu, mem) = (spec.sched.cpu_request, spec.sched.mem_request);
            if desired > actual {
                let mut workers = self.workers.write();
                for _ in actual..desired {
                    let candidates: Vec<Candidate> = workers
                        .iter()
                        .filter(|(_, w)| w.status != WorkerStatus::Dead)
                        .map(|(i, w)| Candidate {
                            index: *i,
                            cpu_capacity: w.record.cpu_capacity,
                            cpu_committed: w.cpu_committed,
                            mem_capacity: w.record.mem_capacity,
                            mem_committed: w.mem_committed,
                        })
                        .collect();
                    let Some(index) = place(cpu, mem, &candidates) else {
                        debug!(function = %name, "no worker can fit another sandbox; deferring");
                        break;
                    };
                    let w = workers.get_mut(&index).expect("placed on known worker");
                    w.commit(cpu, mem);
                    let id = self.next_sandbox_id();
                    st.pending.insert(id, index);
                    st.creates += 1;
                    creates.push((w.record.clone(), index, id));
                }
            } else if desired < actual {
                let mut victims: Vec<(u64, u16, bool)> = st
                    .ready
                    .iter()
                    .map(|(id, r)| (*id, r.worker_index, true))
                    .chain(st.pending.iter().map(|(id, w)| (*id, *w, false)))
                    .collect();
                // Youngest first: ids grow monotonically.
                victims.sort_by(|a, b| b.0.cmp(&a.0));
                victims.truncate((actual - desired) as usize);
                let mut workers = self.workers.write();
                let mut endpoints_changed = false;
                for (id, index, was_ready) in victims {
                    if was_ready {
                        st.ready.remove(&id);
                        endpoints_changed = true;
                    } else {
                        st.pending.remove(&id);
                    }
                    st.kills += 1;
                    if let Some(w) = workers.get_mut(&index) {
                        w.release(cpu, mem);
                        kills.push((w.record.address(), id));
                    }
                }
                if endpoints_changed {
                    set = Some(st.endpoint_set(self.next_version()));
                }
            }
        }
        if let Some(set) = set {
            self.broadcast(set);
        }
        for (record, index, id) in creates {
            let me = self.clone();
            let spec = spec.clone();
            tokio::spawn(async move { me.create_sandbox(record, index, id, spec).await });
        }
        for (addr, id) in kills {
            self.spawn_kill(addr, id);
        }
    }

    async fn create_sandbox(
        self: Arc<Self>,
        worker: ComponentRecord,
        index: u16,
        id: u64,
        spec: FunctionSpec,
    ) {
        if self.persist_sandboxes() {
            let placeholder = SandboxRecord {
                id,
                ip: worker.ip,
                port: 0,
                worker_index: index,
            };
            if let Err(e) = self
                .ctx
                .store
                .put(
                    Namespace::Sandboxes,
                    &id.to_string(),
                    placeholder.encode().to_vec(),
                )
                .await
            {
                warn!("ablation write failed: {e}");
                self.abandon_pending(&spec, index, id);
                return;
            }
        }
        let req = WorkerRequest::CreateSandbox {
            sandbox_id: id,
            spec: spec.clone(),
        };
        match self
            .ctx
            .rpc
            .call::<_, WorkerResponse>(&worker.address(), &req)
            .await
        {
            Ok(WorkerResponse::Accepted) => {}
            other => {
                debug!(worker = %worker.address(), function = %spec.name, "create rejected: {other:?}");
                self.abandon_pending(&spec, index, id);
            }
        }
    }

    fn abandon_pending(&self, spec: &FunctionSpec, index: u16, id: u64) {
        if let Some(f) = self.function(&spec.name) {
            if f.write().pending.remove(&id).is_some() {
                if let Some(w) = self.workers.write().get_mut(&index) {
                    w.release(spec.sched.cpu_request, spec.sched.mem_request);
                }
            }
        }
        // Retried on the next periodic pass rather than immediately.
        self.mark_dirty(&spec.name, false);
    }

    fn spawn_kill(&self, addr: String, id: u64) {
        self.killed.lock().insert(id);
        let rpc = self.ctx.rpc.clone();
        let store = self.persist_sandboxes().then(|| self.ctx.store.clone());
        tokio::spawn(async move {
            if let Some(store) = store {
                if let Err(e) = store.delete(Namespace::Sandboxes, &id.to_string()).await {
                    warn!("ablation delete failed: {e}");
                }
            }
            if let Err(e) = rpc
                .call::<_, WorkerResponse>(&addr, &WorkerRequest::KillSandbox { sandbox_id: id })
                .await
            {
                debug!(worker = %addr, sandbox = id, "kill failed: {e}");
            }
        });
    }

    pub async fn sandbox_ready(
        &self,
        worker_index: u16,
        function: &str,
        record: SandboxRecord,
    ) -> CpResponse {
        if self.killed.lock().contains(&record.id) {
            return CpResponse::Ack;
        }
        let worker_addr = self
            .workers
            .read()
            .get(&worker_index)
            .map(|w| w.record.address());
        let Some(f) = self.function(function) else {
            if let Some(addr) = worker_addr {
                self.spawn_kill(addr, record.id);
            }
            return CpResponse::Ack;
        };
        if worker_addr.is_none() {
            return CpResponse::Error(Failure::new(
                ErrorCode::NotFound,
                format!("unknown worker {worker_index}"),
            ));
        }
        if self.persist_sandboxes() {
            if let Err(e) = self
                .ctx
                .store
                .put(
                    Namespace::Sandboxes,
                    &record.id.to_string(),
                    record.encode().to_vec(),
                )
                .await
            {
                return CpResponse::Error(store_failure(
                    &self.ctx.store,
                    e,
                    &self.ctx.cfg.control.replicas,
                ));
            }
        }
        let set = {
            let mut st = f.write();
            if st.ready.contains_key(&record.id) {
                None
            } else {
                if st.pending.remove(&record.id).is_none() {
                    if let Some(w) = self.workers.write().get_mut(&worker_index) {
                        w.commit(st.spec.sched.cpu_request, st.spec.sched.mem_request);
                    }
                }
                st.ready.insert(record.id, record);
                Some(st.endpoint_set(self.next_version()))
            }
        };
        if let Some(set) = set {
            self.broadcast(set);
        }
        CpResponse::Ack
    }

    pub fn sandbox_failed(
        &self,
        worker_index: u16,
        function: &str,
        sandbox_id: u64,
        reason: &str,
    ) -> CpResponse {
        debug!(
            function,
            sandbox = sandbox_id,
            worker = worker_index,
            reason,
            "sandbox failed"
        );
        let Some(f) = self.function(function) else {
            return CpResponse::Ack;
        };
        let set = {
            let mut st = f.write();
            let (cpu, mem) = (st.spec.sched.cpu_request, st.spec.sched.mem_request);
            let was_pending = st.pending.remove(&sandbox_id).is_some();
            let was_ready = st.ready.remove(&sandbox_id).is_some();
            if was_pending || was_ready {
                if let Some(w) = self.workers.write().get_mut(&worker_index) {
                    w.release(cpu, mem);
                }
            }
            was_ready.then(|| st.endpoint_set(self.next_version()))
        };
        if let Some(set) = set {
            self.broadcast(set);
        }
        self.mark_dirty(function, true);
        CpResponse::Ack
    }

    // ---- introspection ----

    pub fn render_metrics(&self, out: &mut MetricsText) {
        let functions: Vec<_> = self.functions.read().values().cloned().collect();
        let now = monotonic_ms();
        let mut total_ready = 0;
        let mut total_pending = 0;
        for f in &functions {
            let st = f.read();
            let (stable, panic) = st.scaler.averages(&st.spec.sched, now);
            let name = &st.spec.name;
            out.function("desired_scale", name, st.scaler.desired());
            out.function("ready_sandboxes", name, st.ready.len());
            out.function("pending_sandboxes", name, st.pending.len());
            out.function("stable_inflight", name, stable);
            out.function("panic_inflight", name, panic);
            out.function("panicking", name, u8::from(st.scaler.panicking()));
            out.function("sandbox_creates_total", name, st.creates);
            out.function("sandbox_kills_total", name, st.kills);
            out.function("endpoint_version", name, st.version);
            total_ready += st.ready.len();
            total_pending += st.pending.len();
        }
        out.global("functions", functions.len());
        out.global("ready_sandboxes", total_ready);
        out.global("pending_sandboxes", total_pending);
        let workers = self.workers.read();
        out.global("workers", workers.len());
        out.global(
            "workers_dead",
            workers
                .values()
                .filter(|w| w.status == WorkerStatus::Dead)
                .count(),
        );
        out.global("dataplanes_live", self.live_dataplanes().len());
    }

    /// Ready sandboxes per function, for tests and the harness.
    pub fn ready_view(&self) -> BTreeMap<String, Vec<SandboxRecord>> {
        let functions: Vec<_> = self.functions.read().values().cloned().collect();
        functions
            .iter()
            .map(|f| {
                let st = f.read();
                (st.spec.name.clone(), st.ready.values().copied().collect())
            })
            .collect()
    }
}
