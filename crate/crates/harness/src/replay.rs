//! Open-loop load generation: trace replay and rate sweeps.
//!
//! One scheduler task fires submissions at their planned instants and never
//! waits for responses; every invocation runs on its own task and sends its
//! record to a single collector.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Serialize;
use tokio::sync::mpsc;
use tracing::{info, warn};

use baton_core::FunctionSpec;

use crate::client::ClusterClient;
use crate::report::{InvocationRecord, Outcome};
use crate::stats::{mean, percentiles};
use crate::trace::Trace;

/// One planned submission.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned {
    pub at: Duration,
    pub function: Arc<str>,
}

/// Flattens a trace into submissions ordered by time.
pub fn plan(trace: &Trace) -> Vec<Planned> {
    let mut out: Vec<Planned> = trace
        .functions
        .iter()
        .flat_map(|f| {
            let name: Arc<str> = Arc::from(f.name.as_str());
            f.arrivals_ms.iter().map(move |a| Planned {
                at: Duration::from_millis(*a),
                function: name.clone(),
            })
        })
        .collect();
    out.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.function.cmp(&b.function)));
    out
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub timeout: Duration,
    pub body: Bytes,
    /// Reference execution time per function (ms).
    pub exec_reference: HashMap<String, f64>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            body: Bytes::from_static(b"x"),
            exec_reference: HashMap::new(),
        }
    }
}

/// Submits `plan` open-loop and returns one record per submission, ordered
/// by planned time.
pub async fn replay(
    client: &ClusterClient,
    plan: &[Planned],
    opts: &ReplayOptions,
) -> Vec<InvocationRecord> {
    let (tx, mut rx) = mpsc::unbounded_channel::<(usize, InvocationRecord)>();
    let origin = Instant::now() + Duration::from_millis(20);
    let opts = Arc::new(opts.clone());
    // The tokio timer wheel has millisecond granularity; a dedicated thread
    // with nanosleep keeps submission drift well below that.
    let scheduler = {
        let client = client.clone();
        let plan = plan.to_vec();
        let handle = tokio::runtime::Handle::current();
        std::thread::Builder::new()
            .name("replay-scheduler".into())
            .spawn(move || {
                for (i, p) in plan.into_iter().enumerate() {
                    let due = origin + p.at;
                    let now = Instant::now();
                    if due > now {
                        std::thread::sleep(due - now);
                    }
                    let (client, tx, opts) = (client.clone(), tx.clone(), opts.clone());
                    handle.spawn(async move {
                        let rec = invoke_once(&client, &p, origin, &opts).await;
                        let _ = tx.send((i, rec));
                    });
                }
            })
            .expect("spawn scheduler thread")
    };
    let mut records: Vec<Option<InvocationRecord>> = vec![None; plan.len()];
    let mut received = 0;
    while received < plan.len() {
        match rx.recv().await {
            Some((i, rec)) => {
                records[i] = Some(rec);
                received += 1;
            }
            None => break,
        }
    }
    let _ = tokio::task::spawn_blocking(move || scheduler.join()).await;
    records.into_iter().flatten().collect()
}

fn ms_since(origin: Instant, t: Instant) -> f64 {
    t.saturating_duration_since(origin).as_secs_f64() * 1000.0
}

async fn invoke_once(
    client: &ClusterClient,
    p: &Planned,
    origin: Instant,
    opts: &ReplayOptions,
) -> InvocationRecord {
    let submit = Instant::now();
    let result = client
        .invoke(&p.function, opts.body.clone(), None, opts.timeout)
        .await;
    let response = Instant::now();
    let (outcome, queued) = match result {
        Ok(r) if r.ok() => (Outcome::Ok, r.queued),
        Ok(r) => {
            tracing::debug!(function = %p.function, status = r.status, "invocation failed");
            (Outcome::Error, r.queued)
        }
        Err(crate::client::ClientError::Http(e)) if e.is_timeout() => (Outcome::Timeout, false),
        Err(_) => (Outcome::Error, false),
    };
    InvocationRecord {
        function: p.function.to_string(),
        t_scheduled: p.at.as_secs_f64() * 1000.0,
        t_submit: ms_since(origin, submit),
        t_response: ms_since(origin, response),
        outcome,
        queued,
        exec_reference: opts
            .exec_reference
            .get(&*p.function)
            .copied()
            .unwrap_or(0.0),
    }
}

/// Function spec used for a trace function: a spin loop sized to its
/// execution time on this host.
pub fn trace_spec(
    name: &str,
    exec_ms: f64,
    memory_mb: u32,
    iterations_per_ms: f64,
) -> FunctionSpec {
    let iterations = (exec_ms * iterations_per_ms).round().max(1.0) as u64;
    let mut spec = FunctionSpec::new(name, format!("spin:{iterations}"));
    spec.sched.mem_request = memory_mb;
    spec
}

/// Registers every spec, returning per-registration latency in ms.
pub async fn register_all(
    client: &ClusterClient,
    specs: &[FunctionSpec],
) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(specs.len());
    for s in specs {
        out.push(client.register(s).await?.as_secs_f64() * 1000.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepMode {
    /// Every invocation targets a function without sandboxes.
    Cold,
    /// Invocations share pre-scaled functions.
    Warm,
}

impl std::str::FromStr for SweepMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cold" => Ok(Self::Cold),
            "warm" => Ok(Self::Warm),
            _ => Err(format!("unknown sweep mode {s:?}; expected cold or warm")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepStep {
    pub rate: f64,
    pub offered: usize,
    pub ok: usize,
    pub failed: usize,
    pub achieved_rps: f64,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub drift_p99_ms: Option<f64>,
}

impl SweepStep {
    pub fn from_records(rate: f64, records: &[InvocationRecord]) -> Self {
        let ok: Vec<&InvocationRecord> = records.iter().filter(|r| r.ok()).collect();
        let lat: Vec<f64> = ok.iter().map(|r| r.e2e()).collect();
        let q = percentiles(&lat, &[50.0, 99.0]);
        // Time until 99% of the successful responses arrived; a lone
        // straggler should not decide whether the step kept up.
        let done: Vec<f64> = ok.iter().map(|r| r.t_response).collect();
        let span = match (
            records.iter().map(|r| r.t_submit).reduce(f64::min),
            percentiles(&done, &[99.0])[0],
        ) {
            (Some(a), Some(b)) if b > a => (b - a) / 1000.0,
            _ => f64::INFINITY,
        };
        let drift: Vec<f64> = records.iter().map(|r| r.t_submit - r.t_scheduled).collect();
        Self {
            rate,
            offered: records.len(),
            ok: ok.len(),
            failed: records.len() - ok.len(),
            achieved_rps: 0.99 * ok.len() as f64 / span,
            p50_ms: q[0],
            p99_ms: q[1],
            mean_ms: mean(&lat),
            drift_p99_ms: percentiles(&drift, &[99.0])[0],
        }
    }

    /// Served everything it was offered at roughly the offered rate.
    pub fn healthy(&self) -> bool {
        self.offered > 0
            && self.failed * 100 <= self.offered
            && self.achieved_rps >= 0.9 * self.rate
    }
}

/// Highest rate of the initial run of steps that are healthy and whose p50
/// stays within `flat_factor` of the first step's p50. `None` if even the
/// first step fails that test.
pub fn knee(steps: &[SweepStep], flat_factor: f64) -> Option<f64> {
    let base = steps.first()?.p50_ms?;
    steps
        .iter()
        .take_while(|s| s.healthy() && s.p50_ms.is_some_and(|p| p <= flat_factor * base))
        .last()
        .map(|s| s.rate)
}

/// Constant-rate plan over `functions`, round-robin.
pub fn constant_rate(rate: f64, duration: Duration, functions: &[Arc<str>]) -> Vec<Planned> {
    let n = (rate * duration.as_secs_f64()).round() as usize;
    (0..n)
        .map(|i| Planned {
            at: Duration::from_secs_f64(i as f64 / rate),
            function: functions[i % functions.len()].clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub mode: SweepMode,
    pub rates: Vec<f64>,
    pub step: Duration,
    /// Upper bound on waiting for the previous step's sandboxes to go away.
    pub settle: Duration,
    pub timeout: Duration,
    /// Name prefix of the functions the sweep registers.
    pub prefix: String,
    /// Scheduling windows of the sweep functions; short so cold functions
    /// return to zero between steps.
    pub window: Duration,
    pub image: String,
    pub warm_functions: usize,
    pub warm_scale: u32,
    /// Stop after the first unhealthy step past this many.
    pub stop_after_unhealthy: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            mode: SweepMode::Cold,
            rates: vec![25.0, 50.0, 100.0, 200.0, 300.0, 400.0],
            step: Duration::from_secs(5),
            settle: Duration::from_secs(30),
            timeout: Duration::from_secs(30),
            prefix: "sweep".into(),
            window: Duration::from_secs(2),
            image: "echo".into(),
            warm_functions: 4,
            warm_scale: 2,
            stop_after_unhealthy: 2,
        }
    }
}

impl SweepOptions {
    fn spec(&self, name: String) -> FunctionSpec {
        let mut spec = FunctionSpec::new(name, self.image.clone());
        spec.sched.stable_window = self.window;
        spec.sched.panic_window = self.window / 2;
        spec.sched.scale_to_zero_grace = Duration::ZERO;
        spec.sched.queue_timeout = self.timeout;
        if self.mode == SweepMode::Warm {
            spec.sched.min_scale = self.warm_scale;
        }
        spec
    }

    fn pool_size(&self) -> usize {
        match self.mode {
            SweepMode::Cold => {
                let max = self.rates.iter().copied().fold(0.0, f64::max);
                (max * self.step.as_secs_f64()).ceil() as usize
            }
            SweepMode::Warm => self.warm_functions.max(1),
        }
    }
}

/// Waits until none of `names` has endpoints, or `limit` passes.
async fn settle(client: &ClusterClient, names: &[Arc<str>], limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    let wanted: std::collections::HashSet<&str> = names.iter().map(|s| &**s).collect();
    loop {
        if let Ok(snaps) = client.functions().await {
            let busy = snaps
                .iter()
                .filter(|s| wanted.contains(s.spec.name.as_str()))
                .filter(|s| {
                    s.endpoints
                        .as_ref()
                        .is_some_and(|e| !e.endpoints.is_empty())
                })
                .count();
            if busy == 0 {
                return true;
            }
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
}

/// Runs a stepped rate sweep. Functions are registered on first use.
pub async fn sweep(client: &ClusterClient, opts: &SweepOptions) -> anyhow::Result<Vec<SweepStep>> {
    let names: Vec<Arc<str>> = (0..opts.pool_size())
        .map(|i| Arc::from(format!("{}-{i:05}", opts.prefix)))
        .collect();
    let specs: Vec<FunctionSpec> = names.iter().map(|n| opts.spec(n.to_string())).collect();
    register_all(client, &specs).await?;
    if opts.mode == SweepMode::Warm {
        // Wait for the minimum scale to come up before measuring.
        let deadline = Instant::now() + opts.settle;
        loop {
            let snaps = client.functions().await?;
            let ready = snaps
                .iter()
                .filter(|s| names.iter().any(|n| **n == *s.spec.name))
                .all(|s| {
                    s.endpoints
                        .as_ref()
                        .is_some_and(|e| e.endpoints.len() >= opts.warm_scale as usize)
                });
            if ready || Instant::now() > deadline {
                break;
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
    let replay_opts = ReplayOptions {
        timeout: opts.timeout,
        ..ReplayOptions::default()
    };
    let mut steps = Vec::new();
    let mut unhealthy = 0;
    for &rate in &opts.rates {
        if opts.mode == SweepMode::Cold && !settle(client, &names, opts.settle).await {
            warn!(rate, "sandboxes of the previous step are still around");
        }
        let planned = constant_rate(rate, opts.step, &names);
        let records = replay(client, &planned, &replay_opts).await;
        let step = SweepStep::from_records(rate, &records);
        info!(
            rate,
            ok = step.ok,
            failed = step.failed,
            p50 = ?step.p50_ms,
            p99 = ?step.p99_ms,
            achieved = step.achieved_rps,
            "sweep step done"
        );
        let healthy = step.healthy();
        steps.push(step);
        if !healthy {
            unhealthy += 1;
            if unhealthy >= opts.stop_after_unhealthy {
                break;
            }
        }
    }
    Ok(steps)
}

pub fn write_sweep(path: &std::path::Path, steps: &[SweepStep]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(rate: f64, p50: f64, healthy: bool) -> SweepStep {
        SweepStep {
            rate,
            offered: 100,
            ok: if healthy { 100 } else { 50 },
            failed: if healthy { 0 } else { 50 },
            achieved_rps: if healthy { rate } else { rate / 2.0 },
            p50_ms: Some(p50),
            p99_ms: Some(p50 * 2.0),
            mean_ms: Some(p50),
            drift_p99_ms: Some(0.1),
        }
    }

    #[test]
    fn knee_is_last_flat_healthy_rate() {
        let s = [
            step(50.0, 60.0, true),
            step(100.0, 62.0, true),
            step(200.0, 70.0, true),
            step(300.0, 200.0, true),
        ];
        assert_eq!(knee(&s, 1.5), Some(200.0));
        let s = [
            step(50.0, 60.0, true),
            step(100.0, 61.0, false),
            step(200.0, 61.0, true),
        ];
        assert_eq!(knee(&s, 1.5), Some(50.0));
    }

    fn served(rate: f64, n: usize, latency: impl Fn(usize) -> f64) -> Vec<InvocationRecord> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 1000.0 / rate;
                InvocationRecord {
                    function: "f".into(),
                    t_scheduled: t,
                    t_submit: t,
                    t_response: t + latency(i),
                    outcome: Outcome::Ok,
                    queued: false,
                    exec_reference: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn one_straggler_keeps_step_healthy() {
        let recs = served(200.0, 1000, |i| if i == 10 { 3000.0 } else { 40.0 });
        assert!(SweepStep::from_records(200.0, &recs).healthy());
    }

    #[test]
    fn growing_backlog_is_unhealthy() {
        // Served at 150/s while offered 200/s.
        let recs = served(200.0, 1000, |i| {
            i as f64 * (1000.0 / 150.0 - 1000.0 / 200.0) + 40.0
        });
        assert!(!SweepStep::from_records(200.0, &recs).healthy());
    }

    #[test]
    fn constant_rate_spacing() {
        let f: Vec<Arc<str>> = vec![Arc::from("a"), Arc::from("b")];
        let p = constant_rate(10.0, Duration::from_secs(2), &f);
        assert_eq!(p.len(), 20);
        assert_eq!(p[3].at, Duration::from_millis(300));
        assert_eq!(&*p[3].function, "b");
    }
}
