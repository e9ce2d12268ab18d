//! Invocation records and the metrics computed from them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats::{geomean, percentiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "timeout")]
    Timeout,
    #[serde(rename = "error")]
    Error,
}

/// One invocation as seen by the load generator. Times are milliseconds
/// since the start of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub function: String,
    /// When the trace asked for the submission.
    pub t_scheduled: f64,
    pub t_submit: f64,
    pub t_response: f64,
    pub outcome: Outcome,
    /// Whether the data plane had to queue the request for a sandbox.
    pub queued: bool,
    pub exec_reference: f64,
}

impl InvocationRecord {
    pub fn e2e(&self) -> f64 {
        self.t_response - self.t_submit
    }

    pub fn scheduling_latency(&self) -> f64 {
        self.e2e() - self.exec_reference
    }

    /// `e2e / exec_reference`; `None` without a reference.
    pub fn slowdown(&self) -> Option<f64> {
        (self.exec_reference > 0.0).then(|| self.e2e() / self.exec_reference)
    }

    pub fn ok(&self) -> bool {
        self.outcome == Outcome::Ok
    }
}

/// Flat CSV row with the derived columns spelled out.
#[derive(Debug, Serialize, Deserialize)]
struct Row {
    function: String,
    t_scheduled_ms: f64,
    t_submit_ms: f64,
    t_response_ms: f64,
    outcome: Outcome,
    queued: bool,
    e2e_ms: f64,
    exec_reference_ms: f64,
    scheduling_ms: f64,
    slowdown: Option<f64>,
}

pub fn write_records(path: &Path, records: &[InvocationRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(Row {
            function: r.function.clone(),
            t_scheduled_ms: r.t_scheduled,
            t_submit_ms: r.t_submit,
            t_response_ms: r.t_response,
            outcome: r.outcome,
            queued: r.queued,
            e2e_ms: r.e2e(),
            exec_reference_ms: r.exec_reference,
            scheduling_ms: r.scheduling_latency(),
            slowdown: r.slowdown(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<InvocationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        out.push(InvocationRecord {
            function: row.function,
            t_scheduled: row.t_scheduled_ms,
            t_submit: row.t_submit_ms,
            t_response: row.t_response_ms,
            outcome: row.outcome,
            queued: row.queued,
            exec_reference: row.exec_reference_ms,
        });
    }
    Ok(out)
}

pub const PERCENTILES: [f64; 4] = [50.0, 90.0, 99.0, 99.9];

/// p50/p90/p99/p99.9; each `None` when there are no samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
    pub p999: Option<f64>,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let q = percentiles(values, &PERCENTILES);
        Self {
            p50: q[0],
            p90: q[1],
            p99: q[2],
            p999: q[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionSummary {
    pub function: String,
    pub invocations: usize,
    pub failures: usize,
    pub geomean_slowdown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub start_s: u64,
    pub invocations: usize,
    pub failures: usize,
    pub p50_e2e: Option<f64>,
    pub p99_e2e: Option<f64>,
    pub geomean_slowdown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub invocations: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub failure_rate: f64,
    pub e2e: Quantiles,
    pub scheduling: Quantiles,
    pub slowdown: Quantiles,
    /// Percentiles over the per-function geometric mean slowdowns.
    pub function_slowdown: Quantiles,
    pub functions: Vec<FunctionSummary>,
    pub series: Vec<Bucket>,
    /// Scheduled-to-actual submission lag.
    pub submit_drift: Quantiles,
}

impl Report {
    /// Summarises `records`, skipping those scheduled before `warmup_ms`.
    /// Latency and slowdown figures only use successful invocations.
    pub fn build(records: &[InvocationRecord], warmup_ms: f64, bucket_s: u64) -> Self {
        let kept: Vec<&InvocationRecord> = records
            .iter()
            .filter(|r| r.t_scheduled >= warmup_ms)
            .collect();
        let ok: Vec<&InvocationRecord> = kept.iter().copied().filter(|r| r.ok()).collect();
        let failures = kept.len() - ok.len();
        let timeouts = kept
            .iter()
            .filter(|r| r.outcome == Outcome::Timeout)
            .count();

        let mut per_fn: BTreeMap<&str, (usize, usize, Vec<f64>)> = BTreeMap::new();
        for r in &kept {
            let e = per_fn.entry(&r.function).or_default();
            e.0 += 1;
            if r.ok() {
                if let Some(s) = r.slowdown() {
                    e.2.push(s);
                }
            } else {
                e.1 += 1;
            }
        }
        let functions: Vec<FunctionSummary> = per_fn
            .into_iter()
            .map(|(f, (n, failed, slow))| FunctionSummary {
                function: f.to_string(),
                invocations: n,
                failures: failed,
                geomean_slowdown: geomean(&slow),
            })
            .collect();
        let fn_geo: Vec<f64> = functions
            .iter()
            .filter_map(|f| f.geomean_slowdown)
            .collect();

        let bucket_ms = (bucket_s.max(1) * 1000) as f64;
        let mut buckets: BTreeMap<u64, Vec<&InvocationRecord>> = BTreeMap::new();
        for r in &kept {
            buckets
                .entry((r.t_scheduled / bucket_ms) as u64)
                .or_default()
                .push(r);
        }
        let series = buckets
            .into_iter()
            .map(|(b, rs)| {
                let ok: Vec<&&InvocationRecord> = rs.iter().filter(|r| r.ok()).collect();
                let e2e: Vec<f64> = ok.iter().map(|r| r.e2e()).collect();
                let q = percentiles(&e2e, &[50.0, 99.0]);
                let slow: Vec<f64> = ok.iter().filter_map(|r| r.slowdown()).collect();
                Bucket {
                    start_s: b * bucket_s.max(1),
                    invocations: rs.len(),
                    failures: rs.len() - ok.len(),
                    p50_e2e: q[0],
                    p99_e2e: q[1],
                    geomean_slowdown: geomean(&slow),
                }
            })
            .collect();

        let vals = |f: &dyn Fn(&InvocationRecord) -> Option<f64>| {
            ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>()
        };
        Report {
            invocations: kept.len(),
            failures,
            timeouts,
            failure_rate: if kept.is_empty() {
                0.0
            } else {
                failures as f64 / kept.len() as f64
            },
            e2e: Quantiles::of(&vals(&|r| Some(r.e2e()))),
            scheduling: Quantiles::of(&vals(&|r| {
                (r.exec_reference > 0.0).then(|| r.scheduling_latency())
            })),
            slowdown: Quantiles::of(&vals(&|r| r.slowdown())),
            function_slowdown: Quantiles::of(&fn_geo),
            functions,
            series,
            submit_drift: Quantiles::of(
                &kept
                    .iter()
                    .map(|r| r.t_submit - r.t_scheduled)
                    .collect::<Vec<_>>(),
            ),
        }
    }

    /// Writes `functions.csv` and `series.csv` into `dir` and returns the
    /// text summary.
    pub fn write(&self, dir: &Path) -> anyhow::Result<String> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("functions.csv"))?;
        for f in &self.functions {
            w.serialize(f)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("series.csv"))?;
        for b in &self.series {
            w.serialize(b)?;
        }
        w.flush()?;
        let summary = self.summary();
        std::fs::File::create(dir.join("summary.txt"))?.write_all(summary.as_bytes())?;
        Ok(summary)
    }

    pub fn summary(&self) -> String {
        fn q(label: &str, q: &Quantiles, unit: &str) -> String {
            let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}{unit}"));
            format!(
                "{label:<26} p50 {}  p90 {}  p99 {}  p99.9 {}\n",
                f(q.p50),
                f(q.p90),
                f(q.p99),
                f(q.p999)
            )
        }
        let mut s = format!(
            "invocations {}  failures {}  timeouts {}  failure rate {:.4}\n",
            self.invocations, self.failures, self.timeouts, self.failure_rate
        );
        s += &q("end-to-end latency", &self.e2e, " ms");
        s += &q("scheduling latency", &self.scheduling, " ms");
        s += &q("slowdown", &self.slowdown, "");
        s += &q("per-function geomean", &self.function_slowdown, "");
        s += &q("submission drift", &self.submit_drift, " ms");
        s
    }
}
