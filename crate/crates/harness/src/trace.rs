//! Invocation traces: one row per function with its arrival instants.
//!
//! File format (CSV with header):
//!
//! ```text
//! name,exec_ms,memory_mb,horizon_ms,arrivals_ms
//! fn-000,42.125,256,600000,812;15530;60177
//! ```
//!
//! `arrivals_ms` are `;`-separated offsets from the start of the trace,
//! ascending. `horizon_ms` is the trace length and is the same on every row.

use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFunction {
    pub name: String,
    /// Execution time on an idle host.
    pub exec_ms: f64,
    pub memory_mb: u32,
    pub arrivals_ms: Vec<u64>,
}

impl TraceFunction {
    /// Invocations per minute over `horizon_ms`.
    pub fn per_minute(&self, horizon_ms: u64) -> Vec<u32> {
        let mut out = vec![0; horizon_ms.div_ceil(60_000) as usize];
        for a in &self.arrivals_ms {
            if let Some(slot) = out.get_mut((a / 60_000) as usize) {
                *slot += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub horizon_ms: u64,
    pub functions: Vec<TraceFunction>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("invalid trace parameters: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    name: String,
    exec_ms: f64,
    memory_mb: u32,
    horizon_ms: u64,
    arrivals_ms: String,
}

impl Trace {
    pub fn invocations(&self) -> usize {
        self.functions.iter().map(|f| f.arrivals_ms.len()).sum()
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(w);
        for f in &self.functions {
            let arrivals = f
                .arrivals_ms
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(";");
            w.serialize(Row {
                name: f.name.clone(),
                exec_ms: f.exec_ms,
                memory_mb: f.memory_mb,
                horizon_ms: self.horizon_ms,
                arrivals_ms: arrivals,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self, TraceError> {
        let mut reader = csv::Reader::from_reader(r);
        let mut functions = Vec::new();
        let mut horizon_ms = 0;
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| TraceError::Row {
                line,
                message: e.to_string(),
            })?;
            let bad = |message: String| TraceError::Row { line, message };
            if !(row.exec_ms > 0.0) {
                return Err(bad(format!(
                    "exec_ms must be positive, got {}",
                    row.exec_ms
                )));
            }
            let mut arrivals = Vec::new();
            for a in row.arrivals_ms.split(';').filter(|s| !s.is_empty()) {
                arrivals.push(
                    a.parse::<u64>()
                        .map_err(|_| bad(format!("bad arrival {a:?}")))?,
                );
            }
            if arrivals.windows(2).any(|w| w[0] > w[1]) {
                return Err(bad("arrivals are not ascending".into()));
            }
            horizon_ms = horizon_ms.max(row.horizon_ms);
            functions.push(TraceFunction {
                name: row.name,
                exec_ms: row.exec_ms,
                memory_mb: row.memory_mb,
                arrivals_ms: arrivals,
            });
        }
        Ok(Self {
            horizon_ms,
            functions,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Arrival pattern of a generated trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// Independent Poisson arrivals per function.
    Poisson,
    /// `count` invocations at the same instant, on distinct functions where
    /// possible.
    Burst { count: u32, at: Duration },
}

impl FromStr for Profile {
    type Err = TraceError;

    /// `poisson` or `burst:<count>@<duration>`, e.g. `burst:100@5s`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || {
            TraceError::Invalid(format!(
                "unknown profile {s:?}; expected poisson or burst:N@T"
            ))
        };
        if s == "poisson" {
            return Ok(Profile::Poisson);
        }
        let rest = s.strip_prefix("burst:").ok_or_else(bad)?;
        let (count, at) = rest.split_once('@').ok_or_else(bad)?;
        Ok(Profile::Burst {
            count: count.parse().map_err(|_| bad())?,
            at: baton_core::time::parse_duration(at).ok_or_else(bad)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub functions: usize,
    pub duration: Duration,
    pub seed: u64,
    pub profile: Profile,
    /// Per-function Poisson rates are log-uniform in this range
    /// (invocations per minute).
    pub rate_per_minute: (f64, f64),
    /// Median and log-space standard deviation of execution times.
    pub exec_median_ms: f64,
    pub exec_sigma: f64,
    pub memory_choices_mb: Vec<u32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            functions: 50,
            duration: Duration::from_secs(300),
            seed: 1,
            profile: Profile::Poisson,
            rate_per_minute: (2.0, 60.0),
            exec_median_ms: 50.0,
            exec_sigma: 0.6,
            memory_choices_mb: vec![128, 256, 512],
        }
    }
}

/// Deterministic synthetic trace.
pub fn generate(opts: &GenerateOptions) -> Result<Trace, TraceError> {
    let invalid = |m: &str| Err(TraceError::Invalid(m.to_string()));
    if opts.functions == 0 {
        return invalid("at least one function is required");
    }
    if opts.duration.is_zero() {
        return invalid("duration must be positive");
    }
    let (lo, hi) = opts.rate_per_minute;
    if !(lo > 0.0 && lo <= hi) {
        return invalid("rate range must be positive and ordered");
    }
    if !(opts.exec_median_ms > 0.0) || opts.exec_sigma < 0.0 {
        return invalid("execution time distribution must have a positive median");
    }
    if opts.memory_choices_mb.is_empty() {
        return invalid("at least one memory size is required");
    }
    let horizon_ms = opts.duration.as_millis() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let exec = LogNormal::new(opts.exec_median_ms.ln(), opts.exec_sigma)
        .map_err(|e| TraceError::Invalid(e.to_string()))?;
    let width = opts.functions.to_string().len().max(3);
    let mut functions: Vec<TraceFunction> = (0..opts.functions)
        .map(|i| {
            // Quantised so the CSV text round-trips exactly.
            let exec_ms = (exec.sample(&mut rng).clamp(1.0, 60_000.0) * 1000.0).round() / 1000.0;
            let memory_mb = opts.memory_choices_mb[rng.gen_range(0..opts.memory_choices_mb.len())];
            TraceFunction {
                name: format!("fn-{i:0width$}"),
                exec_ms,
                memory_mb,
                arrivals_ms: Vec::new(),
            }
        })
        .collect();
    match opts.profile {
        Profile::Poisson => {
            for f in &mut functions {
                let per_minute = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
                let gap = Exp::new(per_minute / 60_000.0)
                    .map_err(|e| TraceError::Invalid(e.to_string()))?;
                let mut t = gap.sample(&mut rng);
                while (t as u64) < horizon_ms {
                    f.arrivals_ms.push(t as u64);
                    t += gap.sample(&mut rng);
                }
            }
        }
        Profile::Burst { count, at } => {
            let at = at.as_millis() as u64;
            if at >= horizon_ms {
                return invalid("burst instant lies beyond the trace duration");
            }
            let n = functions.len();
            for k in 0..count as usize {
                functions[k % n].arrivals_ms.push(at);
            }
        }
    }
    Ok(Trace {
        horizon_ms,
        functions,
    })
}
