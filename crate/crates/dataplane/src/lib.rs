//! Data plane: queues, throttles, load-balances and proxies invocations.

pub mod async_log;
pub mod cache;
mod server;

pub use server::{
    DataPlane, InvokeError, FUNCTION_HEADER, MODE_HEADER, QUEUED_HEADER, REQUEST_ID_HEADER,
};
