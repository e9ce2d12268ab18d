//! Percentiles and means used by reports and sweeps.

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)` (1-based). `None` for an empty slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    // The epsilon keeps exact ranks exact: 0.999 * 1000 is 999.0000000000001.
    let rank = ((p / 100.0) * n as f64 - 1e-9).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Sorts a copy and returns the requested percentiles.
pub fn percentiles(values: &[f64], ps: &[f64]) -> Vec<Option<f64>> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    ps.iter().map(|p| nearest_rank(&v, *p)).collect()
}

/// Geometric mean of positive values; `None` if empty or any value is not
/// positive.
pub fn geomean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median of the runs left after discarding the first `discard`.
pub fn median_after(values: &[f64], discard: usize) -> Option<f64> {
    let kept = values.get(discard..)?;
    percentiles(kept, &[50.0])[0]
}
