//! Scheduled fault injection against a [`LocalCluster`].
//!
//! A schedule has one event per line, `<time> <action> <target>`:
//!
//! ```text
//! # t      action   target
//! 60s      kill     cp-leader
//! 90s      restart  dp-1
//! 120s     kill     workers:5
//! ```
//!
//! Actions are `kill`, `restart`, `pause` and `resume`. Targets are a
//! component name (`cp-0`, `dp-2`, `worker-7`, `fe`), `cp-leader`, or
//! `workers:K` for the first K running workers.

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tracing::info;

use baton_core::time::parse_duration;

use crate::cluster::{Kind, LocalCluster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Kill,
    Restart,
    Pause,
    Resume,
}

impl FromStr for Action {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "kill" => Ok(Action::Kill),
            "restart" => Ok(Action::Restart),
            "pause" => Ok(Action::Pause),
            "resume" => Ok(Action::Resume),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Named(String),
    Leader,
    Workers(usize),
}

impl FromStr for Target {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        if s == "cp-leader" {
            return Ok(Target::Leader);
        }
        if let Some(k) = s.strip_prefix("workers:") {
            return k.parse().map(Target::Workers).map_err(|_| ());
        }
        if s.is_empty() {
            return Err(());
        }
        Ok(Target::Named(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultEvent {
    pub at: Duration,
    pub action: Action,
    pub target: Target,
}

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("no control plane leader to target")]
    NoLeader,
    #[error(transparent)]
    Cluster(#[from] anyhow::Error),
}

pub fn parse_schedule(text: &str) -> Result<Vec<FaultEvent>, FaultError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| FaultError::Parse {
            line: i + 1,
            message: message.to_string(),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [at, action, target] = parts[..] else {
            return Err(err("expected `<time> <action> <target>`"));
        };
        out.push(FaultEvent {
            at: parse_duration(at).ok_or_else(|| err("bad time"))?,
            action: action.parse().map_err(|_| err("unknown action"))?,
            target: target.parse().map_err(|_| err("bad target"))?,
        });
    }
    out.sort_by_key(|e| e.at);
    Ok(out)
}

/// A fault as it was applied, relative to the schedule start.
#[derive(Debug, Clone, Serialize)]
pub struct AppliedFault {
    pub at_ms: f64,
    pub action: Action,
    pub component: String,
}

/// Applies one event now and returns the components it touched.
pub async fn apply(
    cluster: &mut LocalCluster,
    event: &FaultEvent,
) -> Result<Vec<String>, FaultError> {
    let names = match &event.target {
        Target::Named(n) => {
            if cluster.address(n).is_none() {
                return Err(FaultError::UnknownComponent(n.clone()));
            }
            vec![n.clone()]
        }
        Target::Leader => vec![cluster.leader().await.ok_or(FaultError::NoLeader)?],
        Target::Workers(k) => {
            let live: Vec<String> = cluster
                .names(Kind::Worker)
                .into_iter()
                .filter(|n| cluster.is_running(n))
                .collect();
            live.into_iter().take(*k).collect()
        }
    };
    for n in &names {
        match event.action {
            Action::Kill => cluster.kill(n)?,
            Action::Restart => cluster.restart(n)?,
            Action::Pause => cluster.pause(n)?,
            Action::Resume => cluster.resume(n)?,
        }
        info!(component = %n, action = ?event.action, "fault applied");
    }
    Ok(names)
}

/// Runs `schedule` from `start`, sleeping until each event is due.
pub async fn run_schedule(
    cluster: &mut LocalCluster,
    schedule: &[FaultEvent],
    start: Instant,
) -> Result<Vec<AppliedFault>, FaultError> {
    let mut log = Vec::new();
    for e in schedule {
        tokio::time::sleep_until((start + e.at).into()).await;
        for component in apply(cluster, e).await? {
            log.push(AppliedFault {
                at_ms: start.elapsed().as_secs_f64() * 1000.0,
                action: e.action,
                component,
            });
        }
    }
    Ok(log)
}
