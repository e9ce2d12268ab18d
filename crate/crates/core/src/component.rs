//! Runs a component on its own runtime so it can be torn down abruptly.
//!
//! Dropping the runtime drops every task, socket and timer the component
//! owns, which is the in-process equivalent of killing its process.

use std::future::Future;

use tokio::runtime::{Builder, Handle, Runtime};

pub struct Isolated {
    name: String,
    runtime: Option<Runtime>,
}

impl Isolated {
    pub fn new(name: impl Into<String>) -> std::io::Result<Self> {
        let name = name.into();
        let runtime = Builder::new_multi_thread()
            .worker_threads(1)
            .thread_name(name.clone())
            .enable_all()
            .build()?;
        Ok(Self {
            name,
            runtime: Some(runtime),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn handle(&self) -> Handle {
        self.runtime
            .as_ref()
            .expect("runtime alive")
            .handle()
            .clone()
    }

    pub fn spawn<F>(&self, fut: F) -> tokio::task::JoinHandle<F::Output>
    where
        F: Future + Send + 'static,
        F::Output: Send + 'static,
    {
        self.handle().spawn(fut)
    }

    /// Abrupt termination: no graceful shutdown, in-flight work is dropped.
    pub fn kill(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for Isolated {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[tokio::test]
    async fn kill_closes_listeners() {
        let comp = Isolated::new("t").unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel();
        comp.spawn(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            loop {
                let _ = l.accept().await;
            }
        });
        let addr = rx.await.unwrap();
        assert!(tokio::net::TcpStream::connect(addr).await.is_ok());
        comp.kill();
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(tokio::net::TcpStream::connect(addr).await.is_err());
    }
}
