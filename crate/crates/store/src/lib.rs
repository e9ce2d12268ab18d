//! Durable, replicated key-value store used by the control plane.
//!
//! Each replica owns an append-only log file (length-prefixed records with
//! a CRC32 per record, fsync on every append) and folds it into an
//! in-memory map per namespace. Replicas elect a leader with randomized
//! timeouts, terms and majority votes; the leader streams its log to
//! followers and acknowledges writes either after its own durable append or
//! after a majority holds the entry.

mod kv;
mod log;
mod replica;
pub mod transport;

pub use baton_core::wire::{
    AppendRequest, AppendResponse, LogEntry, LogOp, Namespace, VoteRequest, VoteResponse,
};
pub use kv::KvState;
pub use log::{HardState, LogFile};
pub use replica::{Replica, ReplicaConfig, Role, RoleState, StoreError};
pub use transport::{PeerTransport, TransportError};
