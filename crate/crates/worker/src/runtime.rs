//! Sandbox runtimes behind a three-call interface.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio_util::sync::CancellationToken;
use tracing::{debug, warn};

use baton_core::FunctionSpec;

use crate::sandbox::{self, Behavior, ExecLog};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Image(#[from] sandbox::UnknownImage),
    #[error("cannot start sandbox: {0}")]
    Start(#[from] std::io::Error),
}

/// Anything that can create, kill and list sandboxes can host functions.
#[async_trait]
pub trait Runtime: Send + Sync + 'static {
    /// Starts sandbox `id` for `spec`, serving on `port`. Returns once the
    /// sandbox is launched; readiness is probed separately.
    async fn create(&self, id: u64, spec: &FunctionSpec, port: u16) -> Result<(), RuntimeError>;
    /// Stops sandbox `id`; unknown ids are a no-op.
    async fn kill(&self, id: u64) -> Result<(), RuntimeError>;
    async fn list(&self) -> Vec<u64>;
}

/// How readiness of a freshly created sandbox is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Connect,
    Http,
}

/// Sender side of sandbox exit notifications (sandbox id).
pub type ExitSink = mpsc::UnboundedSender<u64>;

/// Fakes creation with a fixed delay, then serves the function in-process.
pub struct StubRuntime {
    delay: Duration,
    ip: IpAddr,
    log: Option<Arc<ExecLog>>,
    running: Mutex<HashMap<u64, (CancellationToken, tokio::task::JoinHandle<()>)>>,
}

impl StubRuntime {
    pub fn new(delay: Duration, ip: IpAddr, log: Option<Arc<ExecLog>>) -> Self {
        Self {
            delay,
            ip,
            log,
            running: Mutex::new(HashMap::new()),
        }
    }
}

#[async_trait]
impl Runtime for StubRuntime {
    async fn create(&self, id: u64, spec: &FunctionSpec, port: u16) -> Result<(), RuntimeError> {
        let behavior: Behavior = spec.image.parse()?;
        tokio::time::sleep(self.delay).await;
        let listener = TcpListener::bind(SocketAddr::new(self.ip, port)).await?;
        let cancel = CancellationToken::new();
        let stop = cancel.clone();
        let log = self.log.clone();
        let task = tokio::spawn(async move {
            if let Err(e) = sandbox::serve(listener, behavior, id, log, async move {
                stop.cancelled().await
            })
            .await
            {
                warn!(sandbox = id, "stub sandbox stopped: {e}");
            }
        });
        self.running.lock().insert(id, (cancel, task));
        Ok(())
    }

    async fn kill(&self, id: u64) -> Result<(), RuntimeError> {
        let Some((cancel, mut task)) = self.running.lock().remove(&id) else {
            return Ok(());
        };
        cancel.cancel();
        if tokio::time::timeout(Duration::from_secs(1), &mut task)
            .await
            .is_err()
        {
            task.abort();
        }
        Ok(())
    }

    async fn list(&self) -> Vec<u64> {
        self.running.lock().keys().copied().collect()
    }
}

/// Runs each sandbox as a child process of the daemon.
pub struct ProcessRuntime {
    bin: PathBuf,
    exec_log: Option<PathBuf>,
    exits: ExitSink,
    running: Arc<Mutex<HashMap<u64, oneshot::Sender<oneshot::Sender<()>>>>>,
}

impl ProcessRuntime {
    /// `bin` must accept `sandbox --port P --behavior B --id N [--exec-log F]`.
    pub fn new(bin: PathBuf, exec_log: Option<PathBuf>, exits: ExitSink) -> Self {
        Self {
            bin,
            exec_log,
            exits,
            running: Arc::new(Mutex::new(HashMap::new())),
        }
    }
}

#[async_trait]
impl Runtime for ProcessRuntime {
    async fn create(&self, id: u64, spec: &FunctionSpec, port: u16) -> Result<(), RuntimeError> {
        spec.image.parse::<Behavior>()?;
        let mut cmd = tokio::process::Command::new(&self.bin);
        cmd.arg("sandbox")
            .args([
                "--port",
                &port.to_string(),
                "--behavior",
                &spec.image,
                "--id",
                &id.to_string(),
            ])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .kill_on_drop(true);
        if let Some(log) = &self.exec_log {
            cmd.arg("--exec-log").arg(log);
        }
        let mut child = cmd.spawn()?;
        let (kill_tx, kill_rx) = oneshot::channel::<oneshot::Sender<()>>();
        self.running.lock().insert(id, kill_tx);
        let running = self.running.clone();
        let exits = self.exits.clone();
        // Crash watcher: an exit nobody asked for is reported.
        tokio::spawn(async move {
            tokio::select! {
                status = child.wait() => {
                    running.lock().remove(&id);
                    debug!(sandbox = id, ?status, "sandbox process exited");
                    let _ = exits.send(id);
                }
                done = kill_rx => {
                    let _ = child.kill().await;
                    if let Ok(done) = done {
                        let _ = done.send(());
                    }
                }
            }
        });
        Ok(())
    }

    async fn kill(&self, id: u64) -> Result<(), RuntimeError> {
        let Some(kill) = self.running.lock().remove(&id) else {
            return Ok(());
        };
        let (done_tx, done_rx) = oneshot::channel();
        if kill.send(done_tx).is_ok() {
            let _ = done_rx.await;
        }
        Ok(())
    }

    async fn list(&self) -> Vec<u64> {
        self.running.lock().keys().copied().collect()
    }
}
