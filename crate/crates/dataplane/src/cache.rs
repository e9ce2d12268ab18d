//! Per-function routing state: endpoint table, slot reservation and the
//! cold-start queue.
//!
//! The endpoint table is an immutable snapshot swapped atomically on
//! update. Each endpoint carries an in-flight counter; reserving a slot is
//! a compare-and-swap on that counter, so the warm path takes no lock. The
//! FIFO queue has its own short critical section and is only touched when
//! no slot is free.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Instant;

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use tokio::sync::oneshot;

use baton_core::{EndpointSet, FunctionSpec, SandboxRecord};

#[derive(Debug)]
pub struct Endpoint {
    pub record: SandboxRecord,
    inflight: AtomicU32,
}

impl Endpoint {
    fn new(record: SandboxRecord) -> Self {
        Self {
            record,
            inflight: AtomicU32::new(0),
        }
    }

    pub fn inflight(&self) -> u32 {
        self.inflight.load(Ordering::Acquire)
    }
}

#[derive(Debug, Default)]
pub struct EndpointTable {
    pub version: u64,
    pub endpoints: Vec<Arc<Endpoint>>,
}

/// Why a queued invocation did not get a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueError {
    Full,
    Timeout,
    /// The function was removed while the request waited.
    Gone,
}

struct Waiter {
    id: u64,
    enqueued: Instant,
    tx: oneshot::Sender<Reservation>,
}

#[derive(Debug, Default)]
pub struct Counters {
    pub succeeded: AtomicU64,
    pub failed: AtomicU64,
    pub cold: AtomicU64,
    pub dispatched: AtomicU64,
    pub enqueued: AtomicU64,
}

pub struct FunctionCache {
    spec: ArcSwap<FunctionSpec>,
    table: ArcSwap<EndpointTable>,
    queue: Mutex<VecDeque<Waiter>>,
    queue_bound: usize,
    waiter_seq: AtomicU64,
    /// Executing plus queued requests.
    inflight: AtomicU64,
    pub counters: Counters,
    /// Enqueue time of the most recently dispatched waiter (FIFO audit).
    last_dispatched_enqueue: Mutex<Option<Instant>>,
    /// Endpoints dropped from the table, keyed by sandbox id. A record that
    /// comes back while old reservations still hold it resumes their
    /// counter. Also serializes `apply`.
    retired: Mutex<HashMap<u64, Weak<Endpoint>>>,
}

/// A reserved processing slot on one endpoint; released on drop, which
/// also hands the slot to the next queued request.
pub struct Reservation {
    cache: Arc<FunctionCache>,
    endpoint: Arc<Endpoint>,
    queued_for: Option<std::time::Duration>,
}

impl std::fmt::Debug for Reservation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reservation")
            .field("endpoint", &self.endpoint.record)
            .finish()
    }
}

impl Reservation {
    pub fn endpoint(&self) -> &SandboxRecord {
        &self.endpoint.record
    }

    /// Time spent queued, if the request had to wait.
    pub fn queued_for(&self) -> Option<std::time::Duration> {
        self.queued_for
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.endpoint.inflight.fetch_sub(1, Ordering::AcqRel);
        self.cache.dispatch();
    }
}

impl FunctionCache {
    pub fn new(spec: FunctionSpec, queue_bound: usize) -> Arc<Self> {
        Arc::new(Self {
            spec: ArcSwap::from_pointee(spec),
            table: ArcSwap::from_pointee(EndpointTable::default()),
            queue: Mutex::new(VecDeque::new()),
            queue_bound,
            waiter_seq: AtomicU64::new(0),
            inflight: AtomicU64::new(0),
            counters: Counters::default(),
            last_dispatched_enqueue: Mutex::new(None),
            retired: Mutex::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> Arc<FunctionSpec> {
        self.spec.load_full()
    }

    pub fn set_spec(self: &Arc<Self>, spec: FunctionSpec) {
        self.spec.store(Arc::new(spec));
        self.dispatch();
    }

    pub fn table(&self) -> Arc<EndpointTable> {
        self.table.load_full()
    }

    pub fn version(&self) -> u64 {
        self.table.load().version
    }

    pub fn endpoint_set(&self) -> EndpointSet {
        let t = self.table.load();
        EndpointSet {
            function: self.spec.load().name.clone(),
            version: t.version,
            endpoints: t.endpoints.iter().map(|e| e.record).collect(),
        }
    }

    pub fn inflight(&self) -> u64 {
        self.inflight.load(Ordering::Acquire)
    }

    pub fn queued(&self) -> usize {
        self.queue.lock().len()
    }

    pub fn enter(&self) {
        self.inflight.fetch_add(1, Ordering::AcqRel);
    }

    pub fn leave(&self) {
        self.inflight.fetch_sub(1, Ordering::AcqRel);
    }

    /// Applies `set` if it is newer than the cached table. Endpoints that
    /// stay keep their counters; removed ones drain as their running
    /// requests finish. Returns whether the update was applied.
    pub fn apply(self: &Arc<Self>, set: &EndpointSet) -> bool {
        let mut retired = self.retired.lock();
        let current = self.table.load_full();
        if set.version <= current.version {
            return false;
        }
        let endpoints: Vec<Arc<Endpoint>> = set
            .endpoints
            .iter()
            .map(|r| {
                current
                    .endpoints
                    .iter()
                    .find(|e| e.record == *r)
                    .cloned()
                    .or_else(|| {
                        retired
                            .get(&r.id)
                            .and_then(Weak::upgrade)
                            .filter(|e| e.record == *r)
                    })
                    .unwrap_or_else(|| Arc::new(Endpoint::new(*r)))
            })
            .collect();
        for e in &current.endpoints {
            if !endpoints.iter().any(|n| Arc::ptr_eq(n, e)) {
                retired.insert(e.record.id, Arc::downgrade(e));
            }
        }
        retired
            .retain(|id, w| w.strong_count() > 0 && !endpoints.iter().any(|e| e.record.id == *id));
        self.table.store(Arc::new(EndpointTable {
            version: set.version,
            endpoints,
        }));
        drop(retired);
        self.dispatch();
        true
    }

    fn reserve_on(self: &Arc<Self>, endpoint: &Arc<Endpoint>, target: u32) -> bool {
        let mut seen = endpoint.inflight.load(Ordering::Acquire);
        loop {
            if seen >= target {
                return false;
            }
            match endpoint.inflight.compare_exchange_weak(
                seen,
                seen + 1,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return true,
                Err(now) => seen = now,
            }
        }
    }

    /// Reserves a slot on the least-loaded endpoint with room, skipping
    /// `exclude`. `None` when every endpoint is at its concurrency target.
    pub fn try_reserve_excluding(self: &Arc<Self>, exclude: Option<u64>) -> Option<Reservation> {
        let target = self.spec.load().sched.concurrency_target.max(1);
        let table = self.table.load();
        loop {
            let best = table
                .endpoints
                .iter()
                .filter(|e| Some(e.record.id) != exclude)
                .map(|e| (e.inflight(), e))
                .filter(|(n, _)| *n < target)
                .min_by_key(|(n, _)| *n)
                .map(|(_, e)| e.clone())?;
            if self.reserve_on(&best, target) {
                return Some(Reservation {
                    cache: self.clone(),
                    endpoint: best,
                    queued_for: None,
                });
            }
        }
    }

    pub fn try_reserve(self: &Arc<Self>) -> Option<Reservation> {
        self.try_reserve_excluding(None)
    }

    /// Reserves a slot, queueing in FIFO order behind earlier requests when
    /// none is free. `on_queue` runs once if the request has to wait.
    pub async fn acquire(
        self: &Arc<Self>,
        timeout: std::time::Duration,
        on_queue: impl FnOnce(),
    ) -> Result<Reservation, QueueError> {
        let rx = {
            let mut q = self.queue.lock();
            if q.is_empty() {
                if let Some(r) = self.try_reserve() {
                    return Ok(r);
                }
            }
            if q.len() >= self.queue_bound {
                return Err(QueueError::Full);
            }
            let (tx, rx) = oneshot::channel();
            let id = self.waiter_seq.fetch_add(1, Ordering::Relaxed);
            q.push_back(Waiter {
                id,
                enqueued: Instant::now(),
                tx,
            });
            self.counters.enqueued.fetch_add(1, Ordering::Relaxed);
            (id, rx)
        };
        on_queue();
        let (id, rx) = rx;
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(_)) => Err(QueueError::Gone),
            Err(_) => {
                self.queue.lock().retain(|w| w.id != id);
                Err(QueueError::Timeout)
            }
        }
    }

    /// Hands free slots to queued requests, oldest first.
    pub fn dispatch(self: &Arc<Self>) {
        let mut spare: Option<Reservation> = None;
        {
            let mut q = self.queue.lock();
            while !q.is_empty() {
                let r = match spare.take() {
                    Some(r) => r,
                    None => match self.try_reserve() {
                        Some(r) => r,
                        None => break,
                    },
                };
                let w = q.pop_front().expect("non-empty");
                let mut r = r;
                r.queued_for = Some(w.enqueued.elapsed());
                match w.tx.send(r) {
                    Ok(()) => {
                        self.counters.dispatched.fetch_add(1, Ordering::Relaxed);
                        let mut last = self.last_dispatched_enqueue.lock();
                        debug_assert!(
                            last.is_none_or(|t| t <= w.enqueued),
                            "queue dispatched out of order"
                        );
                        *last = Some(w.enqueued);
                    }
                    Err(r) => spare = Some(r),
                }
            }
        }
        // Dropping outside the lock re-enters dispatch with an empty queue.
        drop(spare);
    }

    /// Fails every queued request; used when the function is removed.
    pub fn close(&self) {
        self.queue.lock().clear();
    }
}
