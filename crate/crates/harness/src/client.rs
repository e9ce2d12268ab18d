//! Thin client for driving a cluster: registration through the control
//! plane, invocations through a front-end or data plane address.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use baton_core::rpc::{LeaderClient, RpcClient, RpcError};
use baton_core::wire::{CpRequest, CpResponse, CpStatus, FunctionSnapshot};
use baton_core::FunctionSpec;
use baton_dataplane::async_log::AsyncEnvelope;
use baton_dataplane::{FUNCTION_HEADER, MODE_HEADER, QUEUED_HEADER, REQUEST_ID_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Decode(#[from] serde_json::Error),
}

/// Result of one synchronous invocation.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: bytes::Bytes,
    pub queued: bool,
    pub sandbox: Option<u64>,
}

impl Reply {
    pub fn ok(&self) -> bool {
        self.status == StatusCode::OK.as_u16()
    }
}

#[derive(Clone)]
pub struct ClusterClient {
    cp: Arc<LeaderClient>,
    http: reqwest::Client,
    target: String,
}

impl ClusterClient {
    /// `control` are the control plane replicas, `target` the address that
    /// receives invocations.
    pub fn new(control: Vec<String>, target: impl Into<String>) -> Self {
        let http = reqwest::Client::builder()
            .tcp_nodelay(true)
            .pool_max_idle_per_host(1024)
            .connect_timeout(Duration::from_secs(2))
            .build()
            .expect("http client");
        Self {
            cp: Arc::new(LeaderClient::new(
                RpcClient::new(Duration::from_secs(5)),
                control,
            )),
            http,
            target: target.into(),
        }
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn with_target(&self, target: impl Into<String>) -> Self {
        Self {
            cp: self.cp.clone(),
            http: self.http.clone(),
            target: target.into(),
        }
    }

    pub async fn register(&self, spec: &FunctionSpec) -> Result<Duration, ClientError> {
        let t = Instant::now();
        match self
            .cp
            .call_within(
                &CpRequest::RegisterFunction(spec.clone()),
                Duration::from_secs(10),
            )
            .await?
        {
            CpResponse::Ack => Ok(t.elapsed()),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn functions(&self) -> Result<Vec<FunctionSnapshot>, ClientError> {
        match self.cp.call(&CpRequest::ListFunctions).await? {
            CpResponse::Functions(f) => Ok(f),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    pub async fn invoke(
        &self,
        function: &str,
        body: impl Into<bytes::Bytes>,
        request_id: Option<&str>,
        timeout: Duration,
    ) -> Result<Reply, ClientError> {
        let mut req = self
            .http
            .post(format!("http://{}/invoke", self.target))
            .header(FUNCTION_HEADER, function)
            .timeout(timeout)
            .body(body.into());
        if let Some(id) = request_id {
            req = req.header(REQUEST_ID_HEADER, id);
        }
        let resp = req.send().await?;
        let status = resp.status().as_u16();
        let queued = resp.headers().contains_key(QUEUED_HEADER);
        let sandbox = resp
            .headers()
            .get("x-sandbox-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let body = resp.bytes().await?;
        Ok(Reply {
            status,
            body,
            queued,
            sandbox,
        })
    }

    /// Submits an asynchronous invocation and returns its id.
    pub async fn submit_async(
        &self,
        function: &str,
        body: impl Into<bytes::Bytes>,
    ) -> Result<String, ClientError> {
        let resp = self
            .http
            .post(format!("http://{}/invoke", self.target))
            .header(FUNCTION_HEADER, function)
            .header(MODE_HEADER, "async")
            .timeout(Duration::from_secs(10))
            .body(body.into())
            .send()
            .await?;
        if resp.status() != StatusCode::ACCEPTED {
            return Err(ClientError::Unexpected(format!(
                "async submit answered {}",
                resp.status()
            )));
        }
        let v: serde_json::Value = serde_json::from_slice(&resp.bytes().await?)?;
        v["id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ClientError::Unexpected(v.to_string()))
    }

    pub async fn async_status(&self, id: &str) -> Result<Option<AsyncEnvelope>, ClientError> {
        let resp = self
            .http
            .get(format!("http://{}/async/{id}", self.target))
            .send()
            .await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&resp.bytes().await?)?))
    }
}

/// Status of one control plane replica.
pub async fn cp_status(addr: &str) -> Result<CpStatus, ClientError> {
    match RpcClient::new(Duration::from_millis(500))
        .call(addr, &CpRequest::Status)
        .await?
    {
        CpResponse::Status(s) => Ok(s),
        other => Err(ClientError::Unexpected(format!("{other:?}"))),
    }
}
