use std::collections::HashMap;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{FuturesUnordered, StreamExt};
use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::sync::{watch, Notify};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use baton_core::config::AckMode;
use baton_core::wire::{
    AppendRequest, AppendResponse, LogEntry, LogOp, Namespace, VoteRequest, VoteResponse,
};

use crate::kv::KvState;
use crate::log::{HardState, LogFile};
use crate::transport::PeerTransport;

const MAX_BATCH: usize = 512;

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub id: u64,
    /// Every replica id in the (fixed) replica set, including `id`.
    pub members: Vec<u64>,
    pub election_timeout_min: Duration,
    pub election_timeout_max: Duration,
    pub heartbeat_interval: Duration,
    pub ack_mode: AckMode,
    pub data_dir: PathBuf,
    pub compaction_threshold: u64,
    /// Permits the `Sandboxes` namespace (persistence ablation only).
    pub allow_sandboxes: bool,
    pub seed: u64,
}

impl ReplicaConfig {
    pub fn new(id: u64, members: Vec<u64>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            id,
            members,
            election_timeout_min: Duration::from_millis(150),
            election_timeout_max: Duration::from_millis(300),
            heartbeat_interval: Duration::from_millis(50),
            ack_mode: AckMode::LeaderLocal,
            data_dir: data_dir.into(),
            compaction_threshold: 64 << 20,
            allow_sandboxes: false,
            seed: 0,
        }
    }

    fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    fn peers(&self) -> impl Iterator<Item = u64> + '_ {
        self.members.iter().copied().filter(move |m| *m != self.id)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not the leader (leader: {leader:?})")]
    NotLeader { leader: Option<u64> },
    #[error("namespace {0:?} is not persisted")]
    NamespaceForbidden(Namespace),
    #[error("storage i/o: {0}")]
    Io(#[from] io::Error),
    #[error("write not replicated to a majority in time")]
    ReplicationTimeout,
    #[error("store stopped")]
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleState {
    pub role: Role,
    pub term: u64,
    pub leader: Option<u64>,
}

struct Inner {
    hard: HardState,
    role: Role,
    leader: Option<u64>,
    log: LogFile,
    last_heard: Instant,
    next_index: HashMap<u64, u64>,
    match_index: HashMap<u64, u64>,
    last_ack: HashMap<u64, Instant>,
    leader_since: Instant,
}

impl Inner {
    fn state(&self) -> RoleState {
        RoleState {
            role: self.role,
            term: self.hard.term,
            leader: self.leader,
        }
    }
}

/// One replica of the store. Create with [`Replica::open`], then
/// [`Replica::start`] the election timers.
pub struct Replica {
    cfg: ReplicaConfig,
    inner: Mutex<Inner>,
    kv: RwLock<KvState>,
    transport: Arc<dyn PeerTransport>,
    role_tx: watch::Sender<RoleState>,
    commit_tx: watch::Sender<u64>,
    peer_notify: HashMap<u64, Arc<Notify>>,
    write_lock: tokio::sync::Mutex<()>,
    writes: AtomicU64,
    leader_terms: Mutex<Vec<u64>>,
    cancel: CancellationToken,
    rng: Mutex<ChaCha8Rng>,
}

impl Replica {
    pub fn open(
        cfg: ReplicaConfig,
        transport: Arc<dyn PeerTransport>,
    ) -> Result<Arc<Self>, StoreError> {
        assert!(cfg.members.contains(&cfg.id), "replica must be a member");
        std::fs::create_dir_all(&cfg.data_dir)?;
        let hard = HardState::load(&cfg.data_dir)?;
        let log = LogFile::open(&cfg.data_dir)?;
        let mut kv = KvState::default();
        log.fold_into(&mut kv);
        let now = Instant::now();
        let inner = Inner {
            hard,
            role: Role::Follower,
            leader: None,
            log,
            last_heard: now,
            next_index: HashMap::new(),
            match_index: HashMap::new(),
            last_ack: HashMap::new(),
            leader_since: now,
        };
        let (role_tx, _) = watch::channel(inner.state());
        let (commit_tx, _) = watch::channel(0);
        let peer_notify = cfg.peers().map(|p| (p, Arc::new(Notify::new()))).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Arc::new(Self {
            cfg,
            inner: Mutex::new(inner),
            kv: RwLock::new(kv),
            transport,
            role_tx,
            commit_tx,
            peer_notify,
            write_lock: tokio::sync::Mutex::new(()),
            writes: AtomicU64::new(0),
            leader_terms: Mutex::new(Vec::new()),
            cancel: CancellationToken::new(),
            rng: Mutex::new(rng),
        }))
    }

    /// Starts election timers on the current runtime.
    pub fn start(self: &Arc<Self>) {
        let me = self.clone();
        tokio::spawn(async move { me.election_loop().await });
    }

    /// Stops timers and replication; the replica stops answering peers.
    pub fn stop(&self) {
        self.cancel.cancel();
        let mut g = self.inner.lock();
        g.role = Role::Follower;
        g.leader = None;
        self.publish(&g);
    }

    pub fn is_stopped(&self) -> bool {
        self.cancel.is_cancelled()
    }

    pub fn id(&self) -> u64 {
        self.cfg.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn state(&self) -> RoleState {
        self.inner.lock().state()
    }

    pub fn is_leader(&self) -> bool {
        self.inner.lock().role == Role::Leader
    }

    pub fn subscribe(&self) -> watch::Receiver<RoleState> {
        self.role_tx.subscribe()
    }

    /// Number of log appends this replica performed as leader.
    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    /// Terms in which this replica became leader, in order.
    pub fn leader_terms(&self) -> Vec<u64> {
        self.leader_terms.lock().clone()
    }

    pub fn last_index(&self) -> u64 {
        self.inner.lock().log.last_index()
    }

    pub fn get(&self, ns: Namespace, key: &str) -> Option<Vec<u8>> {
        self.kv.read().get(ns, key).cloned()
    }

    pub fn scan(&self, ns: Namespace) -> Vec<(String, Vec<u8>)> {
        self.kv.read().scan(ns)
    }

    pub async fn put(&self, ns: Namespace, key: &str, value: Vec<u8>) -> Result<(), StoreError> {
        self.write(ns, LogOp::Put, key, value).await
    }

    pub async fn delete(&self, ns: Namespace, key: &str) -> Result<(), StoreError> {
        self.write(ns, LogOp::Delete, key, Vec::new()).await
    }

    /// Gives up leadership, e.g. when the caller cannot use the store.
    pub fn abdicate(&self) {
        let mut g = self.inner.lock();
        if g.role == Role::Leader {
            warn!(
                id = self.cfg.id,
                term = g.hard.term,
                "abdicating leadership"
            );
            g.role = Role::Follower;
            g.leader = None;
            g.last_heard = Instant::now();
            self.publish(&g);
        }
    }

    async fn write(
        &self,
        ns: Namespace,
        op: LogOp,
        key: &str,
        value: Vec<u8>,
    ) -> Result<(), StoreError> {
        if ns == Namespace::Sandboxes && !self.cfg.allow_sandboxes {
            return Err(StoreError::NamespaceForbidden(ns));
        }
        if self.is_stopped() {
            return Err(StoreError::Stopped);
        }
        let guard = self.write_lock.lock().await;
        let (index, term) = {
            let mut g = self.inner.lock();
            if g.role != Role::Leader {
                return Err(StoreError::NotLeader { leader: g.leader });
            }
            let entry = LogEntry {
                term: g.hard.term,
                index: g.log.last_index() + 1,
                namespace: ns,
                op,
                key: key.to_string(),
                value,
            };
            g.log.append(std::slice::from_ref(&entry))?;
            self.kv.write().apply(&entry);
            self.writes.fetch_add(1, Ordering::Relaxed);
            if self.cfg.members.len() == 1 {
                self.commit_tx.send_replace(entry.index);
            }
            (entry.index, entry.term)
        };
        for n in self.peer_notify.values() {
            n.notify_one();
        }
        drop(guard);

        if self.cfg.ack_mode == AckMode::Majority && self.cfg.members.len() > 1 {
            let mut commit = self.commit_tx.subscribe();
            let mut role = self.role_tx.subscribe();
            let wait = async {
                loop {
                    if *commit.borrow_and_update() >= index {
                        return Ok(());
                    }
                    let r = *role.borrow_and_update();
                    if r.role != Role::Leader || r.term != term {
                        return Err(StoreError::NotLeader { leader: r.leader });
                    }
                    tokio::select! {
                        _ = commit.changed() => {}
                        _ = role.changed() => {}
                        _ = self.cancel.cancelled() => return Err(StoreError::Stopped),
                    }
                }
            };
            return tokio::time::timeout(self.cfg.election_timeout_max * 10, wait)
                .await
                .unwrap_or(Err(StoreError::ReplicationTimeout));
        }
        Ok(())
    }

    fn publish(&self, g: &Inner) {
        self.role_tx.send_if_modified(|s| {
            let new = g.state();
            let changed = *s != new;
            *s = new;
            changed
        });
    }

    fn random_timeout(&self) -> Duration {
        let (lo, hi) = (self.cfg.election_timeout_min, self.cfg.election_timeout_max);
        if lo >= hi {
            return lo;
        }
        let ms = self.rng.lock().gen_range(lo.as_micros()..=hi.as_micros());
        Duration::from_micros(ms as u64)
    }

    fn save_hard(&self, g: &Inner) -> bool {
        match g.hard.save(&self.cfg.data_dir) {
            Ok(()) => true,
            Err(e) => {
                warn!(id = self.cfg.id, "cannot persist election state: {e}");
                false
            }
        }
    }

    async fn election_loop(self: Arc<Self>) {
        if self.cfg.members.len() == 1 {
            self.clone().run_election().await;
        }
        let mut timeout = self.random_timeout();
        let mut seen = self.inner.lock().last_heard;
        loop {
            if self.is_stopped() {
                return;
            }
            let (role, last_heard) = {
                let g = self.inner.lock();
                (g.role, g.last_heard)
            };
            if role == Role::Leader {
                tokio::select! {
                    _ = tokio::time::sleep(self.cfg.heartbeat_interval) => {}
                    _ = self.cancel.cancelled() => return,
                }
                self.leader_tick();
                continue;
            }
            if last_heard != seen {
                seen = last_heard;
                timeout = self.random_timeout();
            }
            let deadline = last_heard + timeout;
            if Instant::now() >= deadline {
                self.clone().run_election().await;
                timeout = self.random_timeout();
                seen = self.inner.lock().last_heard;
                continue;
            }
            tokio::select! {
                _ = tokio::time::sleep_until(deadline) => {}
                _ = self.cancel.cancelled() => return,
            }
        }
    }

    async fn run_election(self: Arc<Self>) {
        let (req, term) = {
            let mut g = self.inner.lock();
            g.hard.term += 1;
            g.hard.voted_for = Some(self.cfg.id);
            g.role = Role::Candidate;
            g.leader = None;
            g.last_heard = Instant::now();
            if !self.save_hard(&g) {
                g.role = Role::Follower;
                return;
            }
            self.publish(&g);
            let req = VoteRequest {
                term: g.hard.term,
                candidate: self.cfg.id,
                last_log_index: g.log.last_index(),
                last_log_term: g.log.last_term(),
            };
            (req, g.hard.term)
        };
        debug!(id = self.cfg.id, term, "starting election");
        let mut votes = 1;
        if votes >= self.cfg.majority() {
            self.become_leader(term);
            return;
        }
        let mut pending: FuturesUnordered<_> = self
            .cfg
            .peers()
            .map(|p| {
                let req = req.clone();
                let t = self.transport.clone();
                let limit = self.cfg.election_timeout_min;
                async move { tokio::time::timeout(limit, t.request_vote(p, req)).await }
            })
            .collect();
        while let Some(result) = pending.next().await {
            let Ok(Ok(resp)) = result else { continue };
            if resp.term > term {
                self.observe_term(resp.term);
                return;
            }
            if resp.granted {
                votes += 1;
                if votes >= self.cfg.majority() {
                    self.become_leader(term);
                    return;
                }
            }
        }
    }

    fn become_leader(self: &Arc<Self>, term: u64) {
        {
            let mut g = self.inner.lock();
            if g.hard.term != term || g.role != Role::Candidate {
                return;
            }
            g.role = Role::Leader;
            g.leader = Some(self.cfg.id);
            let next = g.log.last_index() + 1;
            let now = Instant::now();
            g.leader_since = now;
            for p in self.cfg.peers() {
                g.next_index.insert(p, next);
                g.match_index.insert(p, 0);
                g.last_ack.insert(p, now);
            }
            self.leader_terms.lock().push(term);
            info!(id = self.cfg.id, term, "became leader");
            self.publish(&g);
            if self.cfg.members.len() == 1 {
                self.commit_tx.send_replace(g.log.last_index());
            }
        }
        for p in self.cfg.peers() {
            let me = self.clone();
            tokio::spawn(async move { me.replicate_to(p, term).await });
        }
    }

    fn observe_term(&self, term: u64) {
        let mut g = self.inner.lock();
        if term > g.hard.term {
            g.hard.term = term;
            g.hard.voted_for = None;
            g.role = Role::Follower;
            g.leader = None;
            self.save_hard(&g);
            self.publish(&g);
        }
    }

    /// Periodic leader duties: step down without a quorum, compact the log.
    fn leader_tick(&self) {
        let mut g = self.inner.lock();
        if g.role != Role::Leader {
            return;
        }
        let lease = self.cfg.election_timeout_max * 3;
        let now = Instant::now();
        if now.duration_since(g.leader_since) > lease {
            let live = 1 + g
                .last_ack
                .values()
                .filter(|t| now.duration_since(**t) <= lease)
                .count();
            if live < self.cfg.majority() {
                warn!(
                    id = self.cfg.id,
                    term = g.hard.term,
                    "lost contact with a majority; stepping down"
                );
                g.role = Role::Follower;
                g.leader = None;
                g.last_heard = now;
                self.publish(&g);
                return;
            }
        }
        if g.log.size_bytes() > self.cfg.compaction_threshold {
            let upto = g
                .match_index
                .values()
                .copied()
                .min()
                .unwrap_or(u64::MAX)
                .min(g.log.last_index());
            if upto > g.log.base_index() {
                if let Err(e) = g.log.compact(upto) {
                    warn!("log compaction failed: {e}");
                }
            }
        }
    }

    async fn replicate_to(self: Arc<Self>, peer: u64, term: u64) {
        let notify = self.peer_notify[&peer].clone();
        loop {
            if self.is_stopped() {
                return;
            }
            let req = {
                let g = self.inner.lock();
                if g.role != Role::Leader || g.hard.term != term {
                    return;
                }
                let next = g.next_index[&peer].max(g.log.base_index() + 1);
                let prev_index = next - 1;
                AppendRequest {
                    term,
                    leader: self.cfg.id,
                    prev_index,
                    prev_term: g.log.term_at(prev_index).unwrap_or(0),
                    entries: g.log.entries_from(next, MAX_BATCH),
                }
            };
            let sent = req.entries.len() as u64;
            let prev = req.prev_index;
            let limit = (self.cfg.heartbeat_interval * 4).max(Duration::from_millis(200));
            let mut again = false;
            if let Ok(Ok(resp)) =
                tokio::time::timeout(limit, self.transport.append_entries(peer, req)).await
            {
                if resp.term > term {
                    self.observe_term(resp.term);
                    return;
                }
                let mut g = self.inner.lock();
                if g.role != Role::Leader || g.hard.term != term {
                    return;
                }
                g.last_ack.insert(peer, Instant::now());
                if resp.success {
                    let m = g.match_index[&peer].max(prev + sent);
                    g.match_index.insert(peer, m);
                    g.next_index.insert(peer, m + 1);
                    self.advance_commit(&g);
                    again = m < g.log.last_index();
                } else {
                    let current = g.next_index[&peer];
                    let retry = resp.match_index.clamp(1, current.saturating_sub(1).max(1));
                    again = retry < current && retry > g.log.base_index();
                    g.next_index.insert(peer, retry);
                }
            }
            if again {
                continue;
            }
            tokio::select! {
                _ = tokio::time::sleep(self.cfg.heartbeat_interval) => {}
                _ = notify.notified() => {}
                _ = self.cancel.cancelled() => return,
            }
        }
    }

    fn advance_commit(&self, g: &Inner) {
        let mut matched: Vec<u64> = g.match_index.values().copied().collect();
        matched.push(g.log.last_index());
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = matched[self.cfg.majority() - 1];
        if g.log.term_at(candidate) == Some(g.hard.term) {
            self.commit_tx.send_if_modified(|c| {
                let moved = candidate > *c;
                if moved {
                    *c = candidate;
                }
                moved
            });
        }
    }

    pub fn handle_vote(&self, req: VoteRequest) -> VoteResponse {
        let mut g = self.inner.lock();
        let before = g.hard;
        if self.is_stopped() || req.term < g.hard.term {
            return VoteResponse {
                term: g.hard.term,
                granted: false,
            };
        }
        if req.term > g.hard.term {
            g.hard.term = req.term;
            g.hard.voted_for = None;
            g.role = Role::Follower;
            g.leader = None;
        }
        let up_to_date =
            (req.last_log_term, req.last_log_index) >= (g.log.last_term(), g.log.last_index());
        let free = g.hard.voted_for.is_none_or(|v| v == req.candidate);
        let granted = free && up_to_date;
        if granted {
            g.hard.voted_for = Some(req.candidate);
            g.last_heard = Instant::now();
        }
        let persisted = g.hard == before || self.save_hard(&g);
        self.publish(&g);
        VoteResponse {
            term: g.hard.term,
            granted: granted && persisted,
        }
    }

    pub fn handle_append(&self, req: AppendRequest) -> Result<AppendResponse, StoreError> {
        if self.is_stopped() {
            return Err(StoreError::Stopped);
        }
        let mut g = self.inner.lock();
        if req.term < g.hard.term {
            return Ok(AppendResponse {
                term: g.hard.term,
                success: false,
                match_index: 0,
            });
        }
        if req.term > g.hard.term {
            g.hard.term = req.term;
            g.hard.voted_for = None;
            self.save_hard(&g);
        }
        g.role = Role::Follower;
        g.leader = Some(req.leader);
        g.last_heard = Instant::now();
        self.publish(&g);
        let term = g.hard.term;

        let last = g.log.last_index();
        if req.prev_index > last {
            return Ok(AppendResponse {
                term,
                success: false,
                match_index: last + 1,
            });
        }
        let mut truncated = false;
        if req.prev_index > g.log.base_index()
            && g.log.term_at(req.prev_index) != Some(req.prev_term)
        {
            g.log.truncate_from(req.prev_index)?;
            self.rebuild_kv(&g);
            return Ok(AppendResponse {
                term,
                success: false,
                match_index: req.prev_index.max(1),
            });
        }
        let count = req.entries.len() as u64;
        let mut fresh = Vec::new();
        for e in req.entries {
            if e.index <= g.log.base_index() {
                continue;
            }
            if e.index <= g.log.last_index() {
                if g.log.term_at(e.index) == Some(e.term) {
                    continue;
                }
                g.log.truncate_from(e.index)?;
                truncated = true;
            }
            fresh.push(e);
        }
        g.log.append(&fresh)?;
        if truncated {
            self.rebuild_kv(&g);
        } else {
            let mut kv = self.kv.write();
            for e in &fresh {
                kv.apply(e);
            }
        }
        Ok(AppendResponse {
            term,
            success: true,
            match_index: req.prev_index + count,
        })
    }

    fn rebuild_kv(&self, g: &Inner) {
        let mut kv = KvState::default();
        g.log.fold_into(&mut kv);
        *self.kv.write() = kv;
    }
}
