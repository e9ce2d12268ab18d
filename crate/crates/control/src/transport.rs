//! Store replication over the control plane's RPC endpoint.

use async_trait::async_trait;

use baton_core::rpc::RpcClient;
use baton_core::wire::{
    AppendRequest, AppendResponse, CpRequest, CpResponse, VoteRequest, VoteResponse,
};
use baton_store::{PeerTransport, TransportError};

pub struct RpcPeers {
    rpc: RpcClient,
    addrs: Vec<String>,
}

impl RpcPeers {
    pub fn new(rpc: RpcClient, addrs: Vec<String>) -> Self {
        Self { rpc, addrs }
    }

    async fn call(&self, peer: u64, req: CpRequest) -> Result<CpResponse, TransportError> {
        let addr = self
            .addrs
            .get(peer as usize)
            .ok_or_else(|| TransportError {
                peer,
                reason: "unknown replica".into(),
            })?;
        self.rpc.call(addr, &req).await.map_err(|e| TransportError {
            peer,
            reason: e.to_string(),
        })
    }
}

#[async_trait]
impl PeerTransport for RpcPeers {
    async fn request_vote(
        &self,
        peer: u64,
        req: VoteRequest,
    ) -> Result<VoteResponse, TransportError> {
        match self.call(peer, CpRequest::RequestVote(req)).await? {
            CpResponse::Vote(v) => Ok(v),
            other => Err(TransportError {
                peer,
                reason: format!("unexpected reply {other:?}"),
            }),
        }
    }

    async fn append_entries(
        &self,
        peer: u64,
        req: AppendRequest,
    ) -> Result<AppendResponse, TransportError> {
        match self.call(peer, CpRequest::AppendEntries(req)).await? {
            CpResponse::Append(a) => Ok(a),
            other => Err(TransportError {
                peer,
                reason: format!("unexpected reply {other:?}"),
            }),
        }
    }
}
