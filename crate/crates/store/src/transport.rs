//! How replicas reach each other. The control plane plugs in its RPC
//! client; tests use [`LocalTransport`] which can drop and partition peers.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Weak};

use async_trait::async_trait;
use parking_lot::RwLock;
use thiserror::Error;

use baton_core::wire::{AppendRequest, AppendResponse, VoteRequest, VoteResponse};

use crate::replica::Replica;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("peer {peer} unreachable: {reason}")]
pub struct TransportError {
    pub peer: u64,
    pub reason: String,
}

#[async_trait]
pub trait PeerTransport: Send + Sync {
    async fn request_vote(
        &self,
        peer: u64,
        req: VoteRequest,
    ) -> Result<VoteResponse, TransportError>;
    async fn append_entries(
        &self,
        peer: u64,
        req: AppendRequest,
    ) -> Result<AppendResponse, TransportError>;
}

/// In-process transport connecting replicas by id.
#[derive(Default)]
pub struct LocalTransport {
    replicas: RwLock<HashMap<u64, Weak<Replica>>>,
    /// Replica ids cut off from everyone.
    isolated: RwLock<HashSet<u64>>,
}

impl LocalTransport {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn attach(&self, replica: &Arc<Replica>) {
        self.replicas
            .write()
            .insert(replica.id(), Arc::downgrade(replica));
    }

    pub fn detach(&self, id: u64) {
        self.replicas.write().remove(&id);
    }

    pub fn isolate(&self, id: u64, isolated: bool) {
        if isolated {
            self.isolated.write().insert(id);
        } else {
            self.isolated.write().remove(&id);
        }
    }

    fn target(&self, from: u64, peer: u64) -> Result<Arc<Replica>, TransportError> {
        let iso = self.isolated.read();
        if iso.contains(&peer) || iso.contains(&from) {
            return Err(TransportError {
                peer,
                reason: "partitioned".into(),
            });
        }
        self.replicas
            .read()
            .get(&peer)
            .and_then(Weak::upgrade)
            .filter(|r| !r.is_stopped())
            .ok_or(TransportError {
                peer,
                reason: "down".into(),
            })
    }
}

#[async_trait]
impl PeerTransport for LocalTransport {
    async fn request_vote(
        &self,
        peer: u64,
        req: VoteRequest,
    ) -> Result<VoteResponse, TransportError> {
        let r = self.target(req.candidate, peer)?;
        tokio::task::yield_now().await;
        Ok(r.handle_vote(req))
    }

    async fn append_entries(
        &self,
        peer: u64,
        req: AppendRequest,
    ) -> Result<AppendResponse, TransportError> {
        let r = self.target(req.leader, peer)?;
        tokio::task::yield_now().await;
        r.handle_append(req).map_err(|e| TransportError {
            peer,
            reason: e.to_string(),
        })
    }
}
