//! Front-end router: pins each function to one data plane replica by hash.

pub mod route;
mod server;

pub use route::{fnv1a64, NoReplicas, RoutingTable};
pub use server::Frontend;
