//! Versioned wire messages exchanged between components.
//!
//! Every RPC body is wrapped in an [`Envelope`] whose `v` field must equal
//! [`WIRE_VERSION`]; receivers reject anything else instead of guessing.

use serde::{Deserialize, Serialize};

use crate::model::{ComponentRecord, EndpointSet, FunctionSpec, MetricsSample, SandboxRecord};

pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u8,
    /// Set by a control plane leader on messages it originates, so receivers
    /// can refresh their leader cache without a round trip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<String>,
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Self {
            v: WIRE_VERSION,
            leader: None,
            body,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    NotLeader,
    NotFound,
    Conflict,
    Invalid,
    Unavailable,
    Rejected,
    Internal,
    UnsupportedVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_hint: Option<String>,
}

impl Failure {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            leader_hint: None,
        }
    }

    pub fn not_leader(hint: Option<String>) -> Self {
        Self {
            code: ErrorCode::NotLeader,
            message: "not the leader".into(),
            leader_hint: hint,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)?;
        if let Some(h) = &self.leader_hint {
            write!(f, " (leader: {h})")?;
        }
        Ok(())
    }
}

// ---- replicated store ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Namespace {
    Functions,
    DataPlanes,
    WorkerNodes,
    /// Only writable when the persistence ablation is switched on.
    Sandboxes,
}

impl Namespace {
    pub const PERSISTED: [Namespace; 3] = [
        Namespace::Functions,
        Namespace::DataPlanes,
        Namespace::WorkerNodes,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Namespace::Functions => 0,
            Namespace::DataPlanes => 1,
            Namespace::WorkerNodes => 2,
            Namespace::Sandboxes => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Namespace::Functions,
            1 => Namespace::DataPlanes,
            2 => Namespace::WorkerNodes,
            3 => Namespace::Sandboxes,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogOp {
    Put,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    pub namespace: Namespace,
    pub op: LogOp,
    pub key: String,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub term: u64,
    pub candidate: u64,
    pub last_log_index: u64,
    pub last_log_term: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResponse {
    pub term: u64,
    pub granted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendRequest {
    pub term: u64,
    pub leader: u64,
    pub prev_index: u64,
    pub prev_term: u64,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendResponse {
    pub term: u64,
    pub success: bool,
    /// Highest index known to match the leader's log on success; on failure,
    /// the index the leader should retry from.
    pub match_index: u64,
}

// ---- control plane ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerUsage {
    pub cpu_committed: u32,
    pub mem_committed: u32,
    pub sandboxes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSnapshot {
    pub spec: FunctionSpec,
    pub endpoints: Option<EndpointSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CpRequest {
    RegisterFunction(FunctionSpec),
    DeregisterFunction {
        name: String,
    },
    RegisterComponent(ComponentRecord),
    DeregisterComponent(ComponentRecord),
    ListFunctions,
    Metrics {
        from: String,
        samples: Vec<MetricsSample>,
    },
    Heartbeat {
        record: ComponentRecord,
        usage: Option<WorkerUsage>,
    },
    SandboxReady {
        worker_index: u16,
        function: String,
        record: SandboxRecord,
    },
    SandboxFailed {
        worker_index: u16,
        function: String,
        sandbox_id: u64,
        reason: String,
    },
    RequestVote(VoteRequest),
    AppendEntries(AppendRequest),
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpStatus {
    pub replica_id: usize,
    pub term: u64,
    pub leader: Option<String>,
    pub is_leader: bool,
    /// True once the recovery steps that gate request serving are done.
    pub operational: bool,
    pub store_writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CpResponse {
    Ack,
    Registered {
        index: u16,
        functions: Vec<FunctionSnapshot>,
    },
    Functions(Vec<FunctionSnapshot>),
    Reregister,
    Vote(VoteResponse),
    Append(AppendResponse),
    Status(CpStatus),
    Error(Failure),
}

// ---- data plane ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DpRequest {
    AddFunction(FunctionSpec),
    RemoveFunction {
        name: String,
    },
    /// Full function list from a (new) leader; endpoints are left untouched.
    SyncFunctions(Vec<FunctionSpec>),
    UpdateEndpoints(Vec<EndpointSet>),
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpStatus {
    pub functions: Vec<String>,
    pub endpoints: Vec<EndpointSet>,
    pub synced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DpResponse {
    Ack,
    Status(DpStatus),
    Error(Failure),
}

// ---- worker daemon ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerRequest {
    CreateSandbox { sandbox_id: u64, spec: FunctionSpec },
    KillSandbox { sandbox_id: u64 },
    ListSandboxes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListedSandbox {
    pub function: String,
    pub record: SandboxRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerResponse {
    Accepted,
    Ack,
    Sandboxes(Vec<ListedSandbox>),
    Error(Failure),
}

// ---- front-end router ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeRequest {
    AddReplica { address: String },
    RemoveReplica { address: String },
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeResponse {
    Ack,
    Table {
        replicas: Vec<String>,
        generation: u64,
    },
    Error(Failure),
}

/// Extracts the error variant of a response enum.
pub trait ResponseError {
    fn failure(&self) -> Option<&Failure>;
    fn from_failure(f: Failure) -> Self;
}

macro_rules! response_error {
    ($($t:ty),*) => {$(
        impl ResponseError for $t {
            fn failure(&self) -> Option<&Failure> {
                match self { Self::Error(f) => Some(f), _ => None }
            }
            fn from_failure(f: Failure) -> Self { Self::Error(f) }
        }
    )*};
}
response_error!(CpResponse, DpResponse, WorkerResponse, FeResponse);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn namespace_tags_round_trip() {
        for ns in [
            Namespace::Functions,
            Namespace::DataPlanes,
            Namespace::WorkerNodes,
            Namespace::Sandboxes,
        ] {
            assert_eq!(Namespace::from_tag(ns.tag()), Some(ns));
        }
        assert_eq!(Namespace::from_tag(9), None);
    }

    #[test]
    fn envelope_carries_version() {
        let text = serde_json::to_string(&Envelope::new(CpRequest::ListFunctions)).unwrap();
        assert_eq!(text, r#"{"v":1,"body":"ListFunctions"}"#);
    }
}
