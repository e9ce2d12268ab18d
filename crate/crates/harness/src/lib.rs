//! Trace generation, open-loop replay, fault injection and reporting for
//! baton clusters.

pub mod calibrate;
pub mod client;
pub mod cluster;
pub mod faults;
pub mod ingest;
pub mod replay;
pub mod report;
pub mod stats;
pub mod trace;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/functions.md")]
    mod functions {}
    #[doc = include_str!("../../../book/src/autoscaling.md")]
    mod autoscaling {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/placement.md")]
    mod placement {}
    #[doc = include_str!("../../../book/src/failures.md")]
    mod failures {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
