//! Shared building blocks of the baton serverless cluster manager.
//!
//! Every runtime component (control plane, data plane, worker daemon and
//! front-end router) speaks the types defined here: the domain model and its
//! fixed-width sandbox codec, the versioned wire messages exchanged between
//! components, the flat key-value configuration grammar, and a small RPC
//! transport over HTTP.

pub mod component;
pub mod config;
pub mod metrics;
pub mod model;
pub mod rpc;
pub mod time;
pub mod wire;

pub use model::{
    ComponentKind, ComponentRecord, EndpointSet, FunctionSpec, InvalidSpec, MalformedRecord,
    MetricsSample, SandboxRecord, SchedulingConfig, SANDBOX_RECORD_LEN,
};
