//! Durable record of asynchronous invocations.
//!
//! One JSON object per line, appended and fsynced before the client gets
//! its request id. Later lines for the same id supersede earlier ones, so
//! replaying the file yields each request's latest state.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};

use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AsyncStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsyncEnvelope {
    pub id: String,
    pub function: String,
    /// Base64 payload.
    pub payload: String,
    pub attempts: u32,
    pub status: AsyncStatus,
    /// Base64 response body once done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AsyncLog {
    file: Mutex<File>,
    entries: Mutex<HashMap<String, AsyncEnvelope>>,
}

impl AsyncLog {
    /// Opens (or creates) the log and returns it with every request that
    /// had not finished when the previous process stopped.
    pub fn open(path: &Path) -> io::Result<(Self, Vec<AsyncEnvelope>)> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut entries = HashMap::new();
        let mut intact = 0u64;
        if let Ok(f) = File::open(path) {
            let mut reader = BufReader::new(f);
            let mut line = String::new();
            while reader.read_line(&mut line)? > 0 {
                // Only the final line can be torn; it has no newline.
                if !line.ends_with('\n') {
                    break;
                }
                intact += line.len() as u64;
                if let Ok(env) = serde_json::from_str::<AsyncEnvelope>(line.trim_end()) {
                    entries.insert(env.id.clone(), env);
                }
                line.clear();
            }
            let f = OpenOptions::new().write(true).open(path)?;
            if f.metadata()?.len() > intact {
                f.set_len(intact)?;
                f.sync_all()?;
            }
        }
        let unfinished = entries
            .values()
            .filter(|e| matches!(e.status, AsyncStatus::Queued | AsyncStatus::Running))
            .cloned()
            .collect();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            Self {
                file: Mutex::new(file),
                entries: Mutex::new(entries),
            },
            unfinished,
        ))
    }

    pub fn record(&self, env: &AsyncEnvelope) -> io::Result<()> {
        let mut line = serde_json::to_vec(env).expect("envelope serializes");
        line.push(b'\n');
        {
            let mut f = self.file.lock();
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.entries.lock().insert(env.id.clone(), env.clone());
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<AsyncEnvelope> {
        self.entries.lock().get(id).cloned()
    }

    pub fn counts(&self) -> HashMap<AsyncStatus, usize> {
        let mut out = HashMap::new();
        for e in self.entries.lock().values() {
            *out.entry(e.status).or_default() += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(id: &str, status: AsyncStatus) -> AsyncEnvelope {
        AsyncEnvelope {
            id: id.into(),
            function: "f".into(),
            payload: String::new(),
            attempts: 0,
            status,
            result: None,
            error: None,
        }
    }

    #[test]
    fn replay_returns_unfinished_requests() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("async.log");
        {
            let (log, pending) = AsyncLog::open(&path).unwrap();
            assert!(pending.is_empty());
            log.record(&env("a", AsyncStatus::Queued)).unwrap();
            log.record(&env("b", AsyncStatus::Queued)).unwrap();
            log.record(&env("a", AsyncStatus::Done)).unwrap();
            log.record(&env("c", AsyncStatus::Running)).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"id\":\"d\",\"fun")
            .unwrap();
        let (log, mut pending) = AsyncLog::open(&path).unwrap();
        pending.sort_by(|x, y| x.id.cmp(&y.id));
        let ids: Vec<_> = pending.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(log.get("a").unwrap().status, AsyncStatus::Done);
    }
}
