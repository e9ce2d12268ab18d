//! In-flight based autoscaling.
//!
//! Samples are bucketed by arrival time into buckets of `bucket_ms`. A
//! bucket's value is the last sample that landed in it; an empty bucket
//! inherits the most recent earlier sample for up to [`STALE_BUCKETS`]
//! buckets and is zero after that. Window averages divide by the number of
//! buckets since the first sample of the current activity period (capped at
//! the window length), so a fresh burst is not diluted by silence before it.
//! An activity period starts when a sample arrives more than one stable
//! window after the previous one.
//!
//! Each evaluation at time `now`:
//!
//! 1. `stable = ceil(stable_avg / target)`, `panic = ceil(panic_avg / target)`.
//! 2. If `panic > panic_threshold * ready` the scaler is panicking, and stays
//!    so until the condition has not held for one stable window.
//! 3. Panicking: `desired = max(panic, previous desired)`; otherwise
//!    `desired = stable`.
//! 4. `desired == 0` while the previous value was positive and traffic was
//!    seen less than `scale_to_zero_grace` ago: keep one sandbox.
//! 5. While `now <= suppressed_until`: `desired = max(desired, actual)`.
//! 6. Clamp to `[min_scale, max_scale]`.

use std::collections::VecDeque;
use std::time::Duration;

use baton_core::SchedulingConfig;

/// Buckets an absent sample is carried forward before counting as zero.
pub const STALE_BUCKETS: u64 = 3;

fn buckets(window: Duration, bucket_ms: u64) -> u64 {
    (window.as_millis() as u64).div_ceil(bucket_ms).max(1)
}

/// Time-bucketed record of in-flight samples for one function.
#[derive(Debug, Clone)]
pub struct MetricsRing {
    bucket_ms: u64,
    /// (bucket, value), ascending by bucket, one entry per bucket.
    samples: VecDeque<(u64, u64)>,
    first: Option<u64>,
    last: Option<u64>,
}

impl MetricsRing {
    pub fn new(bucket: Duration) -> Self {
        Self {
            bucket_ms: (bucket.as_millis() as u64).max(1),
            samples: VecDeque::new(),
            first: None,
            last: None,
        }
    }

    pub fn bucket_of(&self, t_ms: u64) -> u64 {
        t_ms / self.bucket_ms
    }

    /// Records a sample; `stable_buckets` bounds retention and activity periods.
    pub fn record(&mut self, now_ms: u64, inflight: u64, stable_buckets: u64) {
        let b = self.bucket_of(now_ms);
        match self.last {
            Some(last) if b <= last + stable_buckets => {}
            _ => self.first = Some(b),
        }
        self.last = Some(self.last.map_or(b, |l| l.max(b)));
        match self.samples.back_mut() {
            Some((bucket, value)) if *bucket == b => *value = inflight,
            _ => self.samples.push_back((b, inflight)),
        }
        let keep_from = b.saturating_sub(stable_buckets + STALE_BUCKETS);
        while self.samples.len() > 1 && self.samples[0].0 < keep_from {
            self.samples.pop_front();
        }
    }

    /// Sum of bucket values over the last `window` buckets ending at the
    /// bucket of `now_ms`, and the divisor to average it by. `(0, 0)` when
    /// there is no activity.
    pub fn window_sum(&self, now_ms: u64, window: u64) -> (u64, u64) {
        let Some(first) = self.first else {
            return (0, 0);
        };
        let c = self.bucket_of(now_ms);
        if c < first {
            return (0, 0);
        }
        let n = window.min(c - first + 1);
        let start = c + 1 - n;
        let mut sum = 0;
        let mut idx = 0;
        let mut carried: Option<(u64, u64)> = None;
        for k in start..=c {
            while idx < self.samples.len() && self.samples[idx].0 <= k {
                carried = Some(self.samples[idx]);
                idx += 1;
            }
            if let Some((b, v)) = carried {
                if k - b <= STALE_BUCKETS {
                    sum += v;
                }
            }
        }
        (sum, n)
    }
}

fn ceil_div(sum: u64, n: u64, target: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    sum.div_ceil(n * target)
}

/// Per-function scaling state.
#[derive(Debug, Clone)]
pub struct Autoscaler {
    ring: MetricsRing,
    bucket_ms: u64,
    panicking: bool,
    last_panic_ms: u64,
    desired: u32,
    last_positive_ms: Option<u64>,
    suppressed_until_ms: Option<u64>,
}

impl Autoscaler {
    pub fn new(cfg: &SchedulingConfig, bucket: Duration) -> Self {
        Self {
            ring: MetricsRing::new(bucket),
            bucket_ms: (bucket.as_millis() as u64).max(1),
            panicking: false,
            last_panic_ms: 0,
            desired: cfg.min_scale,
            last_positive_ms: None,
            suppressed_until_ms: None,
        }
    }

    pub fn record(&mut self, cfg: &SchedulingConfig, now_ms: u64, inflight: u64) {
        self.ring
            .record(now_ms, inflight, buckets(cfg.stable_window, self.bucket_ms));
        if inflight > 0 {
            self.last_positive_ms = Some(now_ms);
        }
    }

    /// Never scale below the actual count until `until_ms` (inclusive).
    pub fn suppress_downscale_until(&mut self, until_ms: u64) {
        self.suppressed_until_ms = Some(until_ms);
    }

    pub fn suppressed_until(&self) -> Option<u64> {
        self.suppressed_until_ms
    }

    pub fn desired(&self) -> u32 {
        self.desired
    }

    pub fn panicking(&self) -> bool {
        self.panicking
    }

    pub fn last_positive(&self) -> Option<u64> {
        self.last_positive_ms
    }

    /// Averages over the stable and panic windows.
    pub fn averages(&self, cfg: &SchedulingConfig, now_ms: u64) -> (f64, f64) {
        let avg = |(s, n): (u64, u64)| if n == 0 { 0.0 } else { s as f64 / n as f64 };
        (
            avg(self
                .ring
                .window_sum(now_ms, buckets(cfg.stable_window, self.bucket_ms))),
            avg(self
                .ring
                .window_sum(now_ms, buckets(cfg.panic_window, self.bucket_ms))),
        )
    }

    /// Computes and stores the desired scale. `ready` counts routable
    /// sandboxes; `actual` also includes pending creations.
    pub fn evaluate(
        &mut self,
        cfg: &SchedulingConfig,
        now_ms: u64,
        ready: u32,
        actual: u32,
    ) -> u32 {
        let target = u64::from(cfg.concurrency_target.max(1));
        let (ss, sn) = self
            .ring
            .window_sum(now_ms, buckets(cfg.stable_window, self.bucket_ms));
        let (ps, pn) = self
            .ring
            .window_sum(now_ms, buckets(cfg.panic_window, self.bucket_ms));
        let stable = ceil_div(ss, sn, target);
        let panic = ceil_div(ps, pn, target);

        if panic as f64 > cfg.panic_threshold * f64::from(ready) {
            self.panicking = true;
            self.last_panic_ms = now_ms;
        } else if self.panicking
            && now_ms.saturating_sub(self.last_panic_ms) >= cfg.stable_window.as_millis() as u64
        {
            self.panicking = false;
        }

        let mut desired = if self.panicking {
            panic.max(u64::from(self.desired))
        } else {
            stable
        };
        if desired == 0 && self.desired > 0 {
            if let Some(t) = self.last_positive_ms {
                if now_ms.saturating_sub(t) < cfg.scale_to_zero_grace.as_millis() as u64 {
                    desired = 1;
                }
            }
        }
        if let Some(until) = self.suppressed_until_ms {
            if now_ms <= until {
                desired = desired.max(u64::from(actual));
            }
        }
        let desired = desired
            .max(u64::from(cfg.min_scale))
            .min(u64::from(cfg.max_scale_or_unbounded())) as u32;
        self.desired = desired;
        desired
    }
}
