//! A from-scratch autoscaler evaluator that keeps every sample and
//! recomputes each window without the ring buffer's pruning.

use std::time::Duration;

use baton_control::autoscale::Autoscaler;
use baton_core::SchedulingConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CARRY: u64 = 3;

pub struct Reference {
    bucket: u64,
    pub samples: Vec<(u64, u64)>,
    pub panicking: bool,
    last_panic: u64,
    desired: u32,
    pub suppressed_until: Option<u64>,
}

impl Reference {
    pub fn new(cfg: &SchedulingConfig, bucket: u64) -> Self {
        Self {
            bucket,
            samples: Vec::new(),
            panicking: false,
            last_panic: 0,
            desired: cfg.min_scale,
            suppressed_until: None,
        }
    }

    fn window_len(&self, d: Duration) -> u64 {
        let ms = d.as_millis() as u64;
        let mut n = ms / self.bucket;
        if ms % self.bucket != 0 {
            n += 1;
        }
        n.max(1)
    }

    fn value_at(&self, k: u64) -> u64 {
        let mut best: Option<(u64, u64)> = None;
        for &(t, v) in &self.samples {
            let b = t / self.bucket;
            if b <= k {
                best = Some((b, v));
            }
        }
        match best {
            Some((b, v)) if k - b <= CARRY => v,
            _ => 0,
        }
    }

    fn period_start(&self, stable_len: u64) -> Option<u64> {
        let mut first = None;
        let mut last: Option<u64> = None;
        for &(t, _) in &self.samples {
            let b = t / self.bucket;
            if last.is_none() || b > last.unwrap() + stable_len {
                first = Some(b);
            }
            last = Some(last.map_or(b, |l| l.max(b)));
        }
        first
    }

    fn average(&self, now: u64, window: Duration, stable_len: u64) -> f64 {
        let Some(first) = self.period_start(stable_len) else {
            return 0.0;
        };
        let c = now / self.bucket;
        if c < first {
            return 0.0;
        }
        let n = self.window_len(window).min(c - first + 1);
        let total: u64 = (c + 1 - n..=c).map(|k| self.value_at(k)).sum();
        total as f64 / n as f64
    }

    pub fn evaluate(&mut self, cfg: &SchedulingConfig, now: u64, ready: u32, actual: u32) -> u32 {
        let stable_len = self.window_len(cfg.stable_window);
        let target = cfg.concurrency_target as f64;
        let stable_want = (self.average(now, cfg.stable_window, stable_len) / target).ceil() as u64;
        let panic_want = (self.average(now, cfg.panic_window, stable_len) / target).ceil() as u64;

        if (panic_want as f64) > cfg.panic_threshold * ready as f64 {
            self.panicking = true;
            self.last_panic = now;
        } else if self.panicking && now - self.last_panic >= cfg.stable_window.as_millis() as u64 {
            self.panicking = false;
        }
        let mut want = if self.panicking {
            panic_want.max(self.desired as u64)
        } else {
            stable_want
        };

        let last_traffic = self
            .samples
            .iter()
            .rev()
            .find(|(_, v)| *v > 0)
            .map(|(t, _)| *t);
        if want == 0 && self.desired > 0 {
            if let Some(t) = last_traffic {
                if now - t < cfg.scale_to_zero_grace.as_millis() as u64 {
                    want = 1;
                }
            }
        }
        if let Some(until) = self.suppressed_until {
            if now <= until && want < actual as u64 {
                want = actual as u64;
            }
        }
        want = want.max(cfg.min_scale as u64);
        if let Some(max) = cfg.max_scale {
            want = want.min(max as u64);
        }
        self.desired = want as u32;
        self.desired
    }
}

pub fn random_config(rng: &mut ChaCha8Rng) -> SchedulingConfig {
    let stable = rng.gen_range(1..=12) * 1000;
    let panic = rng.gen_range(1..=stable / 500) * 500;
    let min_scale = rng.gen_range(0..=2);
    SchedulingConfig {
        concurrency_target: rng.gen_range(1..=4),
        stable_window: Duration::from_millis(stable),
        panic_window: Duration::from_millis(panic.min(stable)),
        panic_threshold: [1.0, 1.5, 2.0, 3.0][rng.gen_range(0..4)],
        scale_to_zero_grace: Duration::from_millis(rng.gen_range(0..=15_000)),
        min_scale,
        max_scale: if rng.gen_bool(0.5) {
            None
        } else {
            Some(min_scale.max(1) + rng.gen_range(0..=12))
        },
        ..SchedulingConfig::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Coverage {
    pub evaluations: u64,
    pub panics: u64,
    pub zeroes: u64,
}

/// Replays `traces` random metric traces through the implementation and the
/// reference, failing on the first differing decision.
pub fn compare_random_traces(traces: u32, seed: u64) -> Result<Coverage, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evaluations = 0u64;
    let mut panics = 0u64;
    let mut zeroes = 0u64;
    for trace in 0..traces {
        let cfg = random_config(&mut rng);
        cfg.validate().unwrap();
        let bucket = [250u64, 500, 1000][rng.gen_range(0..3)];
        let mut imp = Autoscaler::new(&cfg, Duration::from_millis(bucket));
        let mut reference = Reference::new(&cfg, bucket);
        let mut now = rng.gen_range(0..5_000u64);
        let mut ready = 0u32;
        let mut pending = 0u32;
        let burst_level = rng.gen_range(1..=40u64);
        for step in 0..rng.gen_range(10..60) {
            now += match rng.gen_range(0..10) {
                0 => rng.gen_range(10_000..40_000),
                1..=3 => 0,
                _ => rng.gen_range(1..2_500),
            };
            if rng.gen_bool(0.7) {
                let v = match rng.gen_range(0..6) {
                    0 => 0,
                    1 => burst_level,
                    _ => rng.gen_range(0..=8),
                };
                imp.record(&cfg, now, v);
                reference.samples.push((now, v));
            }
            if rng.gen_bool(0.05) {
                let until = now + rng.gen_range(0..20_000);
                imp.suppress_downscale_until(until);
                reference.suppressed_until = Some(until);
            }
            let actual = ready + pending;
            let got = imp.evaluate(&cfg, now, ready, actual);
            let want = reference.evaluate(&cfg, now, ready, actual);
            if got != want {
                return Err(format!("trace {trace} step {step} at t={now}: got {got}, reference {want}; cfg {cfg:?}"));
            }
            if imp.panicking() != reference.panicking {
                return Err(format!("panic state diverged in trace {trace} step {step}"));
            }
            evaluations += 1;
            panics += u64::from(imp.panicking());
            zeroes += u64::from(got == 0);
            // Move the simulated sandbox counts towards the decision.
            if got > actual {
                pending += rng.gen_range(0..=got - actual);
            } else {
                let drop = rng.gen_range(0..=actual - got).min(pending + ready);
                let from_pending = drop.min(pending);
                pending -= from_pending;
                ready -= (drop - from_pending).min(ready);
            }
            let promote = rng.gen_range(0..=pending);
            pending -= promote;
            ready += promote;
        }
    }
    Ok(Coverage {
        evaluations,
        panics,
        zeroes,
    })
}
