//! Control plane: function and component registry, autoscaling, placement,
//! health monitoring and leader recovery.
//!
//! Scaling state (metrics, sandbox sets, endpoint versions) is kept in
//! memory only. After a leader change the new leader rebuilds it from the
//! store's registrations and the sandbox lists reported by workers.

pub mod autoscale;
mod leader;
pub mod placer;
mod server;
pub mod transport;

pub use leader::WorkerStatus;
pub use server::ControlPlane;
