//! Request/response RPC over HTTP/1.1 with versioned JSON envelopes.
//!
//! Every component exposes `POST /rpc`; application-level failures travel
//! as the response enum's `Error` variant so the transport status only
//! reflects transport problems.

use std::future::Future;
use std::time::Duration;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::wire::{
    CpRequest, CpResponse, Envelope, ErrorCode, Failure, ResponseError, WIRE_VERSION,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RpcError {
    /// The request never reached the peer; retrying elsewhere is safe.
    #[error("connect to {0} failed")]
    Connect(String),
    #[error("transport error talking to {addr}: {message}")]
    Transport { addr: String, message: String },
    #[error("request to {0} timed out")]
    Timeout(String),
    #[error("remote failure: {0}")]
    Remote(Failure),
    #[error("undecodable message: {0}")]
    Decode(String),
    #[error("unexpected response: {0}")]
    Unexpected(String),
}

impl RpcError {
    pub fn is_not_leader(&self) -> bool {
        matches!(self, RpcError::Remote(f) if f.code == ErrorCode::NotLeader)
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            RpcError::Remote(f) => Some(f.code),
            _ => None,
        }
    }

    pub fn unexpected(resp: impl std::fmt::Debug) -> Self {
        RpcError::Unexpected(format!("{resp:?}"))
    }
}

#[derive(Deserialize)]
struct RawEnvelope<'a> {
    v: u8,
    #[serde(default)]
    leader: Option<String>,
    #[serde(borrow)]
    body: &'a RawValue,
}

/// Decodes an envelope, rejecting unknown wire versions before looking at
/// the body.
pub fn decode_envelope<T: DeserializeOwned>(bytes: &[u8]) -> Result<Envelope<T>, Failure> {
    let raw: RawEnvelope<'_> = serde_json::from_slice(bytes)
        .map_err(|e| Failure::new(ErrorCode::Invalid, format!("bad envelope: {e}")))?;
    if raw.v != WIRE_VERSION {
        return Err(Failure::new(
            ErrorCode::UnsupportedVersion,
            format!(
                "wire version {} not supported (expected {WIRE_VERSION})",
                raw.v
            ),
        ));
    }
    let body = serde_json::from_str(raw.body.get())
        .map_err(|e| Failure::new(ErrorCode::Invalid, format!("bad body: {e}")))?;
    Ok(Envelope {
        v: raw.v,
        leader: raw.leader,
        body,
    })
}

fn encode<T: Serialize>(env: &Envelope<T>) -> Vec<u8> {
    serde_json::to_vec(env).expect("wire types always serialize")
}

/// Builds the `POST /rpc` route around `handler`. The handler receives the
/// decoded request and the sender's leader tag, if any.
pub fn rpc_route<Req, Resp, H, Fut>(handler: H) -> Router
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + ResponseError + Send + 'static,
    H: Fn(Req, Option<String>) -> Fut + Clone + Send + Sync + 'static,
    Fut: Future<Output = Resp> + Send + 'static,
{
    Router::new().route(
        "/rpc",
        post(move |body: Bytes| {
            let handler = handler.clone();
            async move {
                match decode_envelope::<Req>(&body) {
                    Ok(env) => {
                        let resp = handler(env.body, env.leader).await;
                        rpc_response(StatusCode::OK, &resp)
                    }
                    Err(f) => rpc_response(StatusCode::BAD_REQUEST, &Resp::from_failure(f)),
                }
            }
        }),
    )
}

fn rpc_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(&Envelope::new(body)).expect("wire types always serialize");
    (status, [("content-type", "application/json")], bytes).into_response()
}

/// Pooled HTTP client for component-to-component calls.
#[derive(Clone)]
pub struct RpcClient {
    http: reqwest::Client,
    leader_tag: Option<String>,
}

impl RpcClient {
    pub fn new(timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(Duration::from_millis(500))
            .tcp_nodelay(true)
            .pool_idle_timeout(Duration::from_secs(30))
            .pool_max_idle_per_host(64)
            .build()
            .expect("http client");
        Self {
            http,
            leader_tag: None,
        }
    }

    /// Stamps outgoing envelopes with this leader address.
    pub fn with_leader_tag(mut self, addr: impl Into<String>) -> Self {
        self.leader_tag = Some(addr.into());
        self
    }

    pub fn http(&self) -> &reqwest::Client {
        &self.http
    }

    pub async fn call<Req, Resp>(&self, addr: &str, req: &Req) -> Result<Resp, RpcError>
    where
        Req: Serialize,
        Resp: DeserializeOwned + ResponseError,
    {
        let env = Envelope {
            v: WIRE_VERSION,
            leader: self.leader_tag.clone(),
            body: req,
        };
        let result = self
            .http
            .post(format!("http://{addr}/rpc"))
            .header("content-type", "application/json")
            .body(encode(&env))
            .send()
            .await;
        let resp = match result {
            Ok(r) => r,
            Err(e) => return Err(classify(addr, e)),
        };
        let bytes = resp.bytes().await.map_err(|e| classify(addr, e))?;
        let env: Envelope<Resp> =
            decode_envelope(&bytes).map_err(|f| RpcError::Decode(f.message))?;
        match env.body.failure() {
            Some(f) => Err(RpcError::Remote(f.clone())),
            None => Ok(env.body),
        }
    }
}

fn classify(addr: &str, e: reqwest::Error) -> RpcError {
    if e.is_connect() {
        RpcError::Connect(addr.to_string())
    } else if e.is_timeout() {
        RpcError::Timeout(addr.to_string())
    } else {
        RpcError::Transport {
            addr: addr.to_string(),
            message: e.to_string(),
        }
    }
}

/// Client for the replicated control plane that follows leader hints.
pub struct LeaderClient {
    rpc: RpcClient,
    replicas: Vec<String>,
    state: Mutex<LeaderCursor>,
}

struct LeaderCursor {
    known: Option<String>,
    next: usize,
}

impl LeaderClient {
    pub fn new(rpc: RpcClient, replicas: Vec<String>) -> Self {
        assert!(!replicas.is_empty(), "at least one control plane replica");
        Self {
            rpc,
            replicas,
            state: Mutex::new(LeaderCursor {
                known: None,
                next: 0,
            }),
        }
    }

    pub fn replicas(&self) -> &[String] {
        &self.replicas
    }

    pub fn leader(&self) -> Option<String> {
        self.state.lock().known.clone()
    }

    pub fn set_leader(&self, addr: &str) {
        let mut s = self.state.lock();
        if s.known.as_deref() != Some(addr) {
            s.known = Some(addr.to_string());
        }
    }

    fn target(&self) -> String {
        let mut s = self.state.lock();
        if let Some(k) = &s.known {
            return k.clone();
        }
        let t = self.replicas[s.next % self.replicas.len()].clone();
        s.next += 1;
        t
    }

    fn forget(&self, addr: &str, hint: Option<String>) {
        let mut s = self.state.lock();
        if s.known.as_deref() == Some(addr) || s.known.is_none() {
            s.known = hint.filter(|h| h != addr);
        }
    }

    /// Sends `req` to the leader, following hints and rotating through the
    /// replicas on failure, for at most `budget`.
    pub async fn call_within(
        &self,
        req: &CpRequest,
        budget: Duration,
    ) -> Result<CpResponse, RpcError> {
        let deadline = tokio::time::Instant::now() + budget;
        let mut attempt = 0u32;
        loop {
            let target = self.target();
            match self.rpc.call::<_, CpResponse>(&target, req).await {
                Ok(resp) => {
                    self.set_leader(&target);
                    return Ok(resp);
                }
                Err(RpcError::Remote(f))
                    if f.code == ErrorCode::NotLeader || f.code == ErrorCode::Unavailable =>
                {
                    self.forget(&target, f.leader_hint.clone());
                    if tokio::time::Instant::now() >= deadline {
                        return Err(RpcError::Remote(f));
                    }
                }
                Err(
                    e @ (RpcError::Connect(_) | RpcError::Transport { .. } | RpcError::Timeout(_)),
                ) => {
                    self.forget(&target, None);
                    if tokio::time::Instant::now() >= deadline {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
            attempt += 1;
            if attempt % self.replicas.len() as u32 == 0 {
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
        }
    }

    pub async fn call(&self, req: &CpRequest) -> Result<CpResponse, RpcError> {
        self.call_within(req, Duration::from_secs(2)).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{DpRequest, DpResponse};

    #[test]
    fn unknown_version_is_rejected() {
        let err = decode_envelope::<DpRequest>(br#"{"v":2,"body":"Status"}"#).unwrap_err();
        assert_eq!(err.code, ErrorCode::UnsupportedVersion);
        let ok = decode_envelope::<DpRequest>(br#"{"v":1,"body":"Status"}"#).unwrap();
        assert_eq!(ok.body, DpRequest::Status);
        let bad = decode_envelope::<DpRequest>(br#"{"v":1,"body":"Nope"}"#).unwrap_err();
        assert_eq!(bad.code, ErrorCode::Invalid);
    }

    #[tokio::test]
    async fn round_trip_over_http() {
        let router = rpc_route(|req: DpRequest, leader: Option<String>| async move {
            match req {
                DpRequest::Status => DpResponse::Ack,
                _ => DpResponse::Error(Failure::new(
                    ErrorCode::NotFound,
                    leader.unwrap_or_default(),
                )),
            }
        });
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });

        let client = RpcClient::new(Duration::from_secs(2)).with_leader_tag("cp-1");
        let resp: DpResponse = client.call(&addr, &DpRequest::Status).await.unwrap();
        assert_eq!(resp, DpResponse::Ack);
        let err = client
            .call::<_, DpResponse>(&addr, &DpRequest::RemoveFunction { name: "f".into() })
            .await;
        match err {
            Err(RpcError::Remote(f)) => {
                assert_eq!(f.code, ErrorCode::NotFound);
                assert_eq!(f.message, "cp-1");
            }
            other => panic!("{other:?}"),
        }

        let raw = client
            .http()
            .post(format!("http://{addr}/rpc"))
            .body(r#"{"v":7,"body":"Status"}"#)
            .send()
            .await
            .unwrap();
        assert_eq!(raw.status(), 400);
    }

    #[tokio::test]
    async fn connect_failure_is_classified() {
        let client = RpcClient::new(Duration::from_secs(1));
        let err = client
            .call::<_, DpResponse>("127.0.0.1:1", &DpRequest::Status)
            .await
            .unwrap_err();
        assert!(matches!(err, RpcError::Connect(_)), "{err:?}");
    }
}
