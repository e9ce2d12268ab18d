//! Domain model: functions, sandboxes, registered components and the
//! messages that carry scaling state between them.

use std::net::Ipv4Addr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Encoded size of a [`SandboxRecord`].
pub const SANDBOX_RECORD_LEN: usize = 16;

/// Per-function scheduling knobs. Defaults live in [`SchedulingConfig::default`]
/// and nowhere else; components that need a default read it from there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulingConfig {
    /// Maximum in-flight requests per sandbox.
    pub concurrency_target: u32,
    #[serde(with = "crate::time::duration_ms")]
    pub stable_window: Duration,
    #[serde(with = "crate::time::duration_ms")]
    pub panic_window: Duration,
    pub panic_threshold: f64,
    #[serde(with = "crate::time::duration_ms")]
    pub scale_to_zero_grace: Duration,
    pub min_scale: u32,
    /// `None` means unbounded.
    pub max_scale: Option<u32>,
    /// Millicores.
    pub cpu_request: u32,
    /// Mebibytes.
    pub mem_request: u32,
    #[serde(with = "crate::time::duration_ms")]
    pub queue_timeout: Duration,
}

impl Default for SchedulingConfig {
    fn default() -> Self {
        Self {
            concurrency_target: 1,
            stable_window: Duration::from_secs(60),
            panic_window: Duration::from_secs(6),
            panic_threshold: 2.0,
            scale_to_zero_grace: Duration::from_secs(30),
            min_scale: 0,
            max_scale: None,
            cpu_request: 100,
            mem_request: 128,
            queue_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidSpec {
    #[error("function name must not be empty")]
    EmptyName,
    #[error("port {0} outside 1..=65535")]
    BadPort(u32),
    #[error("concurrency_target must be at least 1")]
    ZeroConcurrency,
    #[error("panic_window must not exceed stable_window")]
    PanicWindowTooLong,
    #[error("min_scale {min} exceeds max_scale {max}")]
    ScaleBounds { min: u32, max: u32 },
    #[error("max_scale must be positive")]
    ZeroMaxScale,
    #[error("panic_threshold must be a positive finite ratio")]
    BadPanicThreshold,
}

impl SchedulingConfig {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        if self.concurrency_target == 0 {
            return Err(InvalidSpec::ZeroConcurrency);
        }
        if self.panic_window > self.stable_window {
            return Err(InvalidSpec::PanicWindowTooLong);
        }
        if !(self.panic_threshold.is_finite() && self.panic_threshold > 0.0) {
            return Err(InvalidSpec::BadPanicThreshold);
        }
        if let Some(max) = self.max_scale {
            if max == 0 {
                return Err(InvalidSpec::ZeroMaxScale);
            }
            if self.min_scale > max {
                return Err(InvalidSpec::ScaleBounds {
                    min: self.min_scale,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn max_scale_or_unbounded(&self) -> u32 {
        self.max_scale.unwrap_or(u32::MAX)
    }
}

/// A registered function: the persisted recipe for creating its sandboxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    /// Resolved by the worker runtime, e.g. `echo`, `spin:20000`, `sleep:50`.
    pub image: String,
    pub port: u32,
    #[serde(default)]
    pub sched: SchedulingConfig,
}

impl FunctionSpec {
    pub fn new(name: impl Into<String>, image: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            image: image.into(),
            port: 8080,
            sched: SchedulingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidSpec> {
        if self.name.is_empty() {
            return Err(InvalidSpec::EmptyName);
        }
        if !(1..=65535).contains(&self.port) {
            return Err(InvalidSpec::BadPort(self.port));
        }
        self.sched.validate()
    }
}

/// Memory-only record of a running sandbox.
///
/// Encodes to exactly [`SANDBOX_RECORD_LEN`] bytes, big-endian:
///
/// ```text
/// id (8) | ipv4 (4) | port (2) | worker_index (2)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SandboxRecord {
    pub id: u64,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub worker_index: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed sandbox record: expected {SANDBOX_RECORD_LEN} bytes, got {0}")]
pub struct MalformedRecord(pub usize);

impl SandboxRecord {
    pub fn encode(&self) -> [u8; SANDBOX_RECORD_LEN] {
        let mut out = [0u8; SANDBOX_RECORD_LEN];
        out[0..8].copy_from_slice(&self.id.to_be_bytes());
        out[8..12].copy_from_slice(&self.ip.octets());
        out[12..14].copy_from_slice(&self.port.to_be_bytes());
        out[14..16].copy_from_slice(&self.worker_index.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MalformedRecord> {
        let bytes: &[u8; SANDBOX_RECORD_LEN] =
            bytes.try_into().map_err(|_| MalformedRecord(bytes.len()))?;
        let id = u64::from_be_bytes(bytes[0..8].try_into().unwrap());
        let ip = Ipv4Addr::new(bytes[8], bytes[9], bytes[10], bytes[11]);
        let port = u16::from_be_bytes([bytes[12], bytes[13]]);
        let worker_index = u16::from_be_bytes([bytes[14], bytes[15]]);
        Ok(Self {
            id,
            ip,
            port,
            worker_index,
        })
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.ip, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentKind {
    DataPlane,
    WorkerNode,
}

/// Persisted registration of a data plane or worker node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub kind: ComponentKind,
    /// Empty for data planes.
    #[serde(default)]
    pub name: String,
    pub ip: Ipv4Addr,
    pub port: u16,
    /// Millicores; zero for data planes.
    #[serde(default)]
    pub cpu_capacity: u32,
    /// Mebibytes; zero for data planes.
    #[serde(default)]
    pub mem_capacity: u32,
}

impl ComponentRecord {
    pub fn data_plane(ip: Ipv4Addr, port: u16) -> Self {
        Self {
            kind: ComponentKind::DataPlane,
            name: String::new(),
            ip,
            port,
            cpu_capacity: 0,
            mem_capacity: 0,
        }
    }

    pub fn worker(name: impl Into<String>, ip: Ipv4Addr, port: u16, cpu: u32, mem: u32) -> Self {
        Self {
            kind: ComponentKind::WorkerNode,
            name: name.into(),
            ip,
            port,
            cpu_capacity: cpu,
            mem_capacity: mem,
        }
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.ip, self.port)
    }

    /// Registry key; unique per (kind, ip, port).
    pub fn key(&self) -> String {
        self.address()
    }
}

/// Versioned list of routable endpoints for one function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSet {
    pub function: String,
    pub version: u64,
    pub endpoints: Vec<SandboxRecord>,
}

/// In-flight load (executing plus queued) observed by a data plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub function: String,
    pub inflight: u64,
    /// Sender-side monotonic clock in milliseconds; informational only, the
    /// receiver buckets samples by arrival time.
    pub timestamp_ms: u64,
}
