//! Worker daemon: runs sandboxes on behalf of the control plane.

mod daemon;
pub mod ports;
pub mod runtime;
pub mod sandbox;

pub use daemon::{Phase, Worker};
pub use ports::PortPool;
pub use runtime::{ExitSink, Probe, ProcessRuntime, Runtime, RuntimeError, StubRuntime};
