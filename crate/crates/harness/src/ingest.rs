//! Conversion of Azure Functions trace CSVs into the internal trace format.
//!
//! Expected columns, matched by header name:
//!
//! * invocations: `HashOwner,HashApp,HashFunction,Trigger,1,..,1440`
//!   (per-minute counts of one day)
//! * durations: `HashOwner,HashApp,HashFunction,Average,...,percentile_Average_50,...` (ms)
//! * memory: `HashOwner,HashApp,...,AverageAllocatedMb,...,AverageAllocatedMb_pct50,...`,
//!   keyed by application, or by function when a `HashFunction` column exists.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::warn;

use crate::trace::{Trace, TraceError, TraceFunction};

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// First minute of the day to keep.
    pub window_start_min: usize,
    /// Number of minutes to keep; `None` keeps the rest of the day.
    pub window_len_min: Option<usize>,
    /// Keep a seeded sample of at most this many active functions.
    pub max_functions: Option<usize>,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            window_start_min: 0,
            window_len_min: None,
            max_functions: None,
            seed: 1,
        }
    }
}

type Key = (String, String, String);

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize, TraceError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| TraceError::Invalid(format!("{file}: missing column {name:?}")))
}

fn row_error(
    file: &str,
    record: &csv::StringRecord,
    message: impl std::fmt::Display,
) -> TraceError {
    let line = record.position().map_or(0, |p| p.line());
    TraceError::Row {
        line,
        message: format!("{file}: {message}"),
    }
}

fn field<'a>(file: &str, r: &'a csv::StringRecord, i: usize) -> Result<&'a str, TraceError> {
    r.get(i)
        .map(str::trim)
        .ok_or_else(|| row_error(file, r, format!("missing field {}", i + 1)))
}

fn number(file: &str, r: &csv::StringRecord, i: usize) -> Result<f64, TraceError> {
    let s = field(file, r, i)?;
    s.parse::<f64>()
        .map_err(|_| row_error(file, r, format!("not a number: {s:?}")))
}

struct Invocations {
    key: Key,
    counts: Vec<u32>,
}

fn read_invocations(path: &Path) -> Result<Vec<Invocations>, TraceError> {
    let file = "invocations";
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let (o, a, f) = (
        column(&headers, "HashOwner", file)?,
        column(&headers, "HashApp", file)?,
        column(&headers, "HashFunction", file)?,
    );
    let minutes: Vec<usize> = (1..=1440)
        .map(|m| column(&headers, &m.to_string(), file))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record?;
        let counts = minutes
            .iter()
            .map(|i| {
                let s = field(file, &r, *i)?;
                s.parse::<u32>()
                    .map_err(|_| row_error(file, &r, format!("bad invocation count {s:?}")))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        let key = (
            field(file, &r, o)?.to_string(),
            field(file, &r, a)?.to_string(),
            field(file, &r, f)?.to_string(),
        );
        out.push(Invocations { key, counts });
    }
    Ok(out)
}

fn read_durations(path: &Path) -> Result<HashMap<Key, f64>, TraceError> {
    let file = "durations";
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let (o, a, f) = (
        column(&headers, "HashOwner", file)?,
        column(&headers, "HashApp", file)?,
        column(&headers, "HashFunction", file)?,
    );
    let median = column(&headers, "percentile_Average_50", file)?;
    let average = column(&headers, "Average", file)?;
    let mut out = HashMap::new();
    for record in reader.records() {
        let r = record?;
        let mut ms = number(file, &r, median)?;
        if !(ms > 0.0) {
            ms = number(file, &r, average)?;
        }
        let key = (
            field(file, &r, o)?.to_string(),
            field(file, &r, a)?.to_string(),
            field(file, &r, f)?.to_string(),
        );
        out.insert(key, ms.max(1.0));
    }
    Ok(out)
}

/// Memory keyed by `(owner, app)` or, with a function column, by full key.
fn read_memory(path: &Path) -> Result<(bool, HashMap<Key, u32>), TraceError> {
    let file = "memory";
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let (o, a) = (
        column(&headers, "HashOwner", file)?,
        column(&headers, "HashApp", file)?,
    );
    let f = column(&headers, "HashFunction", file).ok();
    let median = column(&headers, "AverageAllocatedMb_pct50", file)
        .or_else(|_| column(&headers, "AverageAllocatedMb", file))?;
    let mut out = HashMap::new();
    for record in reader.records() {
        let r = record?;
        let mb = number(file, &r, median)?;
        let function = match f {
            Some(i) => field(file, &r, i)?.to_string(),
            None => String::new(),
        };
        out.insert(
            (
                field(file, &r, o)?.to_string(),
                field(file, &r, a)?.to_string(),
                function,
            ),
            mb.round().max(1.0) as u32,
        );
    }
    Ok((f.is_some(), out))
}

pub fn ingest(
    invocations: &Path,
    durations: &Path,
    memory: &Path,
    opts: &IngestOptions,
) -> Result<Trace, TraceError> {
    let start = opts.window_start_min;
    if start >= 1440 {
        return Err(TraceError::Invalid(format!(
            "window start {start} is past the end of the day"
        )));
    }
    let len = opts
        .window_len_min
        .unwrap_or(1440 - start)
        .min(1440 - start);
    if len == 0 {
        return Err(TraceError::Invalid("empty time window".into()));
    }
    let rows = read_invocations(invocations)?;
    let durations = read_durations(durations)?;
    let (by_function, memory) = read_memory(memory)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seen = HashSet::new();
    let mut functions = Vec::new();
    for row in rows {
        let Some(exec_ms) = durations.get(&row.key) else {
            warn!(function = %row.key.2, "no duration entry; dropped");
            continue;
        };
        let mem_key = if by_function {
            row.key.clone()
        } else {
            (row.key.0.clone(), row.key.1.clone(), String::new())
        };
        let Some(memory_mb) = memory.get(&mem_key) else {
            warn!(function = %row.key.2, "no memory entry; dropped");
            continue;
        };
        let mut name = row.key.2.clone();
        while !seen.insert(name.clone()) {
            name.push('_');
        }
        let mut arrivals = Vec::new();
        for (m, count) in row.counts[start..start + len].iter().enumerate() {
            let base = m as u64 * 60_000;
            let mut minute: Vec<u64> = (0..*count)
                .map(|_| base + rng.gen_range(0..60_000))
                .collect();
            minute.sort_unstable();
            arrivals.extend(minute);
        }
        functions.push(TraceFunction {
            name,
            exec_ms: *exec_ms,
            memory_mb: *memory_mb,
            arrivals_ms: arrivals,
        });
    }
    if let Some(max) = opts.max_functions {
        let mut active: Vec<TraceFunction> = functions
            .into_iter()
            .filter(|f| !f.arrivals_ms.is_empty())
            .collect();
        active.shuffle(&mut rng);
        active.truncate(max);
        active.sort_by(|a, b| a.name.cmp(&b.name));
        functions = active;
    }
    Ok(Trace {
        horizon_ms: len as u64 * 60_000,
        functions,
    })
}
