//! Acceptance criteria C1 to C12. Every test prints one `Cn PASS|FAIL`
//! line to stderr (bypassing the test harness capture) before asserting.
//!
//! Cluster tests spawn real `baton` processes on loopback and are run one
//! at a time. Set `BATON_KEEP=1` to keep each cluster's directory (configs
//! and per-component logs) after the run.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use baton_core::metrics::parse_metrics;
use baton_core::rpc::RpcClient;
use baton_core::wire::{DpRequest, DpResponse, DpStatus, WorkerRequest, WorkerResponse};
use baton_core::{EndpointSet, FunctionSpec, SandboxRecord, SANDBOX_RECORD_LEN};
use baton_dataplane::async_log::AsyncStatus;
use baton_harness::calibrate::exec_reference;
use baton_harness::client::ClusterClient;
use baton_harness::cluster::{Kind, LocalCluster, Topology};
use baton_harness::replay::{
    constant_rate, knee, plan, register_all, replay, sweep, trace_spec, Planned, ReplayOptions,
    SweepMode, SweepOptions, SweepStep,
};
use baton_harness::report::{InvocationRecord, Report};
use baton_harness::stats::{mean, percentiles};
use baton_harness::trace::{generate, GenerateOptions};

#[path = "../../control/tests/oracle/mod.rs"]
mod oracle;

const BIN: &str = env!("CARGO_BIN_EXE_baton");

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!(
        "{id} {} {}\n",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{id} FAIL: {}", detail.as_ref());
}

fn note(text: impl AsRef<str>) {
    let _ = std::io::stderr().write_all(format!("    {}\n", text.as_ref()).as_bytes());
}

struct Env {
    cluster: LocalCluster,
    client: ClusterClient,
    _dir: Option<tempfile::TempDir>,
    path: PathBuf,
}

async fn launch(label: &str, topo: Topology) -> Env {
    let dir = tempfile::Builder::new()
        .prefix(&format!("baton-{label}-"))
        .tempdir()
        .unwrap();
    let path = dir.path().to_path_buf();
    let cluster = LocalCluster::start(Path::new(BIN), &path, &topo).unwrap();
    cluster.wait_ready(Duration::from_secs(60)).await.unwrap();
    let client = ClusterClient::new(cluster.addresses(Kind::ControlPlane), cluster.target());
    let dir = if std::env::var_os("BATON_KEEP").is_some() {
        note(format!("cluster directory {}", dir.keep().display()));
        None
    } else {
        Some(dir)
    };
    Env {
        cluster,
        client,
        _dir: dir,
        path,
    }
}

fn small(control_planes: usize, data_planes: usize, workers: usize) -> Topology {
    Topology {
        control_planes,
        data_planes,
        workers,
        ..Topology::default()
    }
}

/// Spec for functions that should return to zero quickly.
fn short_lived(name: String, image: &str, window: Duration) -> FunctionSpec {
    let mut spec = FunctionSpec::new(name, image);
    spec.sched.stable_window = window;
    spec.sched.panic_window = window / 2;
    spec.sched.scale_to_zero_grace = Duration::ZERO;
    spec
}

fn warm(name: &str, image: &str, min_scale: u32) -> FunctionSpec {
    let mut spec = FunctionSpec::new(name, image);
    spec.sched.min_scale = min_scale;
    spec
}

fn rpc() -> RpcClient {
    RpcClient::new(Duration::from_secs(2))
}

async fn dp_status(addr: &str) -> Option<DpStatus> {
    match rpc().call::<_, DpResponse>(addr, &DpRequest::Status).await {
        Ok(DpResponse::Status(s)) => Some(s),
        _ => None,
    }
}

async fn worker_list(addr: &str) -> Option<Vec<(String, SandboxRecord)>> {
    match rpc()
        .call::<_, WorkerResponse>(addr, &WorkerRequest::ListSandboxes)
        .await
    {
        Ok(WorkerResponse::Sandboxes(v)) => {
            Some(v.into_iter().map(|s| (s.function, s.record)).collect())
        }
        _ => None,
    }
}

async fn metrics_of(addr: &str) -> BTreeMap<String, f64> {
    match reqwest::get(format!("http://{addr}/metrics")).await {
        Ok(r) => parse_metrics(&r.text().await.unwrap_or_default()),
        Err(_) => BTreeMap::new(),
    }
}

async fn leader_sandboxes(addr: &str) -> BTreeSet<(String, u64)> {
    let Ok(r) = reqwest::get(format!("http://{addr}/sandboxes")).await else {
        return BTreeSet::new();
    };
    let body = r.bytes().await.unwrap_or_default();
    let view: BTreeMap<String, Vec<SandboxRecord>> =
        serde_json::from_slice(&body).unwrap_or_default();
    view.into_iter()
        .flat_map(|(f, rs)| rs.into_iter().map(move |r| (f.clone(), r.id)))
        .collect()
}

/// Union of every running worker's sandbox list.
async fn worker_union(env: &Env) -> BTreeSet<(String, u64)> {
    let mut out = BTreeSet::new();
    for name in env.cluster.names(Kind::Worker) {
        if !env.cluster.is_running(&name) {
            continue;
        }
        if let Some(list) = worker_list(&env.cluster.address(&name).unwrap()).await {
            out.extend(list.into_iter().map(|(f, r)| (f, r.id)));
        }
    }
    out
}

/// Waits until every named function has at least `n` endpoints.
async fn wait_endpoints(client: &ClusterClient, names: &[&str], n: usize, limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    loop {
        if let Ok(snaps) = client.functions().await {
            let ok = names.iter().all(|name| {
                snaps
                    .iter()
                    .find(|s| s.spec.name == *name)
                    .and_then(|s| s.endpoints.as_ref())
                    .is_some_and(|e| e.endpoints.len() >= n)
            });
            if ok {
                return true;
            }
        }
        if Instant::now() > deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

/// Waits until none of the functions with `prefix` has endpoints.
async fn wait_drained(client: &ClusterClient, prefix: &str, limit: Duration) -> bool {
    let deadline = Instant::now() + limit;
    loop {
        if let Ok(snaps) = client.functions().await {
            let busy = snaps
                .iter()
                .filter(|s| s.spec.name.starts_with(prefix))
                .any(|s| {
                    s.endpoints
                        .as_ref()
                        .is_some_and(|e| !e.endpoints.is_empty())
                });
            if !busy {
                return true;
            }
        }
        if Instant::now() > deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
}

fn names(prefix: &str, n: usize) -> Vec<Arc<str>> {
    (0..n)
        .map(|i| Arc::from(format!("{prefix}-{i:05}")))
        .collect()
}

fn fmt_ms(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.1}ms"))
}

fn describe(steps: &[SweepStep]) -> String {
    steps
        .iter()
        .map(|s| {
            format!(
                "{}/s:p50={} p99={} ok={}/{}",
                s.rate,
                fmt_ms(s.p50_ms),
                fmt_ms(s.p99_ms),
                s.ok,
                s.offered
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn cold_sweep(prefix: &str, rates: Vec<f64>) -> SweepOptions {
    SweepOptions {
        mode: SweepMode::Cold,
        rates,
        prefix: prefix.into(),
        ..SweepOptions::default()
    }
}

// ---------------------------------------------------------------- C1

struct ColdRun {
    writes: u64,
    creates: u64,
    failed: usize,
    knee: Option<f64>,
    steps: Vec<SweepStep>,
}

async fn cold_run(label: &str, persist: bool) -> ColdRun {
    let env = launch(label, Topology::default().set("persist_sandboxes", persist)).await;
    let pool = names("c1", 1000);
    let specs: Vec<FunctionSpec> = pool
        .iter()
        .map(|n| short_lived(n.to_string(), "echo", Duration::from_secs(2)))
        .collect();
    register_all(&env.client, &specs).await.unwrap();

    let before = env.cluster.store_writes().await;
    let plan = constant_rate(100.0, Duration::from_secs(10), &pool);
    let records = replay(
        &env.client,
        &plan,
        &ReplayOptions {
            timeout: Duration::from_secs(30),
            ..Default::default()
        },
    )
    .await;
    // Count the scale-down path too.
    wait_drained(&env.client, "c1-", Duration::from_secs(30)).await;
    tokio::time::sleep(Duration::from_millis(500)).await;
    let writes = env.cluster.store_writes().await - before;
    let m = env.cluster.leader_metrics().await.unwrap_or_default();
    let creates = m
        .iter()
        .filter(|(k, _)| k.starts_with("sandbox_creates_total{function=\"c1-"))
        .map(|(_, v)| *v as u64)
        .sum();
    let failed = records.iter().filter(|r| !r.ok()).count();

    let steps = sweep(
        &env.client,
        &cold_sweep(
            "k",
            vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0],
        ),
    )
    .await
    .unwrap();
    ColdRun {
        writes,
        creates,
        failed,
        knee: knee(&steps, 1.5),
        steps,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c01_persistence_free_cold_path() {
    let _g = serial();
    let start = Instant::now();
    let base = cold_run("c1-base", false).await;
    note(format!(
        "baseline: writes {} creates {} failed {} sweep {}",
        base.writes,
        base.creates,
        base.failed,
        describe(&base.steps)
    ));
    let abl = cold_run("c1-ablation", true).await;
    note(format!(
        "ablation: writes {} creates {} failed {} sweep {}",
        abl.writes,
        abl.creates,
        abl.failed,
        describe(&abl.steps)
    ));
    let elapsed = start.elapsed();

    let reduced = match (base.knee, abl.knee) {
        (Some(b), Some(a)) => a <= 0.75 * b,
        (Some(_), None) => true,
        _ => false,
    };
    let ok = base.writes == 0
        && base.creates >= 1000
        && abl.creates >= 1000
        && abl.writes >= abl.creates
        && reduced
        && elapsed < Duration::from_secs(300);
    verdict(
        "C1",
        ok,
        format!(
            "1000 cold starts: {} store writes without persistence; with persistence {} writes for {} sandboxes; knee {:?}/s -> {:?}/s; runtime {:.0}s",
            base.writes,
            abl.writes,
            abl.creates,
            base.knee,
            abl.knee,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- C2

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c02_cold_start_throughput_shape() {
    let _g = serial();
    let env = launch("c2", Topology::default()).await;
    let steps = sweep(
        &env.client,
        &cold_sweep("c2", vec![50.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0]),
    )
    .await
    .unwrap();
    note(describe(&steps));
    let k = knee(&steps, 1.5);
    let p99_50 = steps.iter().find(|s| s.rate == 50.0).and_then(|s| s.p99_ms);
    let past: Vec<f64> = match k {
        Some(k) => steps
            .iter()
            .filter(|s| s.rate >= k)
            .filter_map(|s| s.p50_ms)
            .collect(),
        None => Vec::new(),
    };
    let monotone = past.windows(2).all(|w| w[1] >= w[0]);
    let ok = k.is_some_and(|k| k >= 300.0)
        && p99_50.is_some_and(|p| p < 200.0)
        && monotone
        && past.len() >= 2;
    verdict(
        "C2",
        ok,
        format!("knee {k:?}/s (p50 within 1.5x of 50/s), p99 at 50/s {}, p50 past knee {past:.1?} monotone={monotone}", fmt_ms(p99_50)),
    );
}

// ---------------------------------------------------------------- C3

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c03_warm_path_overhead() {
    let _g = serial();
    let service = exec_reference(Path::new(BIN), "echo", 31600).await.unwrap();
    let env = launch("c3", small(3, 3, 4)).await;
    let mut spec = warm("echo", "echo", 8);
    spec.sched.stable_window = Duration::from_secs(60);
    env.client.register(&spec).await.unwrap();
    assert!(wait_endpoints(&env.client, &["echo"], 8, Duration::from_secs(20)).await);
    let f: Vec<Arc<str>> = vec![Arc::from("echo")];
    let opts = ReplayOptions {
        timeout: Duration::from_secs(10),
        ..Default::default()
    };
    replay(
        &env.client,
        &constant_rate(500.0, Duration::from_secs(3), &f),
        &opts,
    )
    .await;

    let records = replay(
        &env.client,
        &constant_rate(500.0, Duration::from_secs(60), &f),
        &opts,
    )
    .await;
    let errors = records.iter().filter(|r| !r.ok()).count();
    let overhead: Vec<f64> = records
        .iter()
        .filter(|r| r.ok())
        .map(|r| r.e2e() - service)
        .collect();
    let q = percentiles(&overhead, &[50.0, 99.0]);
    let achieved = records.len() as f64 / 60.0;
    let ok = errors == 0
        && records.len() == 30_000
        && q[0].is_some_and(|p| p <= 5.0)
        && q[1].is_some_and(|p| p <= 20.0);
    verdict(
        "C3",
        ok,
        format!(
            "{} invocations at {achieved:.0}/s via front-end, {errors} errors, service time {service:.3}ms, added overhead p50 {} p99 {}",
            records.len(),
            fmt_ms(q[0]),
            fmt_ms(q[1])
        ),
    );
}

// ---------------------------------------------------------------- C4

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c04_registration_is_constant_time() {
    let _g = serial();
    let env = launch("c4", small(3, 3, 2)).await;
    let specs: Vec<FunctionSpec> = (0..1000)
        .map(|i| FunctionSpec::new(format!("reg-{i:04}"), "echo"))
        .collect();
    let lat = register_all(&env.client, &specs).await.unwrap();
    let first = mean(&lat[..100]).unwrap();
    let last = mean(&lat[900..]).unwrap();
    let all = mean(&lat).unwrap();
    let listed = env.client.functions().await.unwrap().len();
    let ok = last <= 2.0 * first && all <= 10.0 && listed == 1000;
    verdict("C4", ok, format!("first 100 mean {first:.2}ms, last 100 mean {last:.2}ms, overall {all:.2}ms, {listed} listed"));
}

// ---------------------------------------------------------------- C5

#[test]
fn c05_autoscaler_matches_reference() {
    let _g = serial();
    match oracle::compare_random_traces(10_000, 0xacce97) {
        Ok(c) => verdict(
            "C5",
            c.panics > 0 && c.zeroes > 0,
            format!(
                "10000 traces, {} decisions identical ({} in panic mode, {} at zero)",
                c.evaluations, c.panics, c.zeroes
            ),
        ),
        Err(e) => verdict("C5", false, e),
    }
}

// ---------------------------------------------------------------- C6

fn placer_property() -> Result<(), String> {
    use baton_control::placer::{place, Candidate};
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let candidate =
        (1u32..8_000, 1u32..16_384, 0u32..=100, 0u32..=100).prop_map(|(cpu, mem, cu, mu)| {
            Candidate {
                index: 0,
                cpu_capacity: cpu,
                cpu_committed: cpu / 100 * cu,
                mem_capacity: mem,
                mem_committed: mem / 100 * mu,
            }
        });
    let cluster = prop::collection::vec(candidate, 0..16).prop_map(|mut v| {
        for (i, c) in v.iter_mut().enumerate() {
            c.index = i as u16;
        }
        v
    });
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        ..Config::default()
    });
    runner
        .run(
            &(cluster, 0u32..2_000, 0u32..4_096),
            |(mut workers, cpu, mem)| {
                // Place until full; no worker may ever exceed its capacity.
                let mut placed = 0;
                while let Some(i) = place(cpu, mem, &workers) {
                    let w = &mut workers[i as usize];
                    prop_assert!(w.cpu_committed as u64 + cpu as u64 <= w.cpu_capacity as u64);
                    prop_assert!(w.mem_committed as u64 + mem as u64 <= w.mem_capacity as u64);
                    w.cpu_committed += cpu;
                    w.mem_committed += mem;
                    placed += 1;
                    if placed > 200 {
                        break;
                    }
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// Sixteen threads reserve endpoints while one reshapes the table; each
/// holder bumps an independent counter for its endpoint.
fn balancing_stress(target: u32) -> Result<(u64, u32), String> {
    use baton_dataplane::cache::FunctionCache;
    fn set(version: u64, ids: std::ops::Range<u64>) -> EndpointSet {
        let rec = |id: u64| SandboxRecord {
            id,
            ip: Ipv4Addr::LOCALHOST,
            port: 2000 + id as u16,
            worker_index: 0,
        };
        EndpointSet {
            function: "f".into(),
            version,
            endpoints: ids.map(rec).collect(),
        }
    }
    let mut spec = FunctionSpec::new("f", "echo");
    spec.sched.concurrency_target = target;
    let cache = FunctionCache::new(spec, 1 << 20);
    cache.apply(&set(1, 0..5));
    let shadow: Arc<Mutex<HashMap<u64, Arc<AtomicU32>>>> = Arc::default();
    let peak = Arc::new(AtomicU32::new(0));
    let version = Arc::new(AtomicU64::new(1));
    let threads: Vec<_> = (0..16u64)
        .map(|t| {
            let (cache, shadow, peak, version) =
                (cache.clone(), shadow.clone(), peak.clone(), version.clone());
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t ^ 0xc6);
                let mut n = 0u64;
                for i in 0..20_000 {
                    if t == 0 && i % 400 == 0 {
                        let v = version.fetch_add(1, Ordering::SeqCst) + 1;
                        let lo = rng.gen_range(0..4);
                        cache.apply(&set(v, lo..lo + rng.gen_range(1..6)));
                    }
                    let Some(r) = cache.try_reserve() else {
                        continue;
                    };
                    n += 1;
                    let slot = shadow
                        .lock()
                        .unwrap()
                        .entry(r.endpoint().id)
                        .or_default()
                        .clone();
                    let now = slot.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    if rng.gen_bool(0.3) {
                        std::thread::yield_now();
                    }
                    slot.fetch_sub(1, Ordering::SeqCst);
                    drop(r);
                }
                n
            })
        })
        .collect();
    let total: u64 = threads.into_iter().map(|h| h.join().unwrap()).sum();
    let leaked = cache.table().endpoints.iter().any(|e| e.inflight() != 0);
    if leaked {
        return Err("reservation slots leaked".into());
    }
    Ok((total, peak.load(Ordering::SeqCst)))
}

#[test]
fn c06_placement_and_balancing_properties() {
    let _g = serial();
    let placer = placer_property();
    let mut stress = Vec::new();
    for target in 1..=3 {
        stress.push((target, balancing_stress(target)));
    }
    let stress_ok = stress
        .iter()
        .all(|(t, r)| matches!(r, Ok((n, peak)) if *n > 0 && *peak <= *t));
    let detail = format!(
        "placer over 10000 random cluster states: {}; 16-thread stress peak/target: {}",
        placer
            .as_ref()
            .map_or_else(|e| e.clone(), |_| "never over-committed".into()),
        stress
            .iter()
            .map(|(t, r)| match r {
                Ok((n, peak)) => format!("{peak}/{t} over {n} reservations"),
                Err(e) => format!("target {t}: {e}"),
            })
            .collect::<Vec<_>>()
            .join(", ")
    );
    verdict("C6", placer.is_ok() && stress_ok, detail);
}

// ---------------------------------------------------------------- C7

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c07_leader_failover() {
    let _g = serial();
    let mut env = launch("c7", Topology::default()).await;
    let window = Duration::from_secs(5);
    let mut w = warm("warm", "echo", 4);
    w.sched.stable_window = window;
    w.sched.panic_window = window / 2;
    env.client.register(&w).await.unwrap();
    let cold = names("c7", 600);
    let specs: Vec<FunctionSpec> = cold
        .iter()
        .map(|n| short_lived(n.to_string(), "echo", window))
        .collect();
    register_all(&env.client, &specs).await.unwrap();
    assert!(wait_endpoints(&env.client, &["warm"], 4, Duration::from_secs(20)).await);

    let opts = ReplayOptions {
        timeout: Duration::from_secs(30),
        ..Default::default()
    };
    let cold_plan = constant_rate(20.0, Duration::from_secs(25), &cold);
    let warm_plan = constant_rate(50.0, Duration::from_secs(25), &[Arc::from("warm")]);
    let old = env.cluster.leader().await.unwrap();
    let t0 = Instant::now();
    let client = env.client.clone();
    let cold_task = {
        let c = client.clone();
        let o = opts.clone();
        tokio::spawn(async move { replay(&c, &cold_plan, &o).await })
    };
    let warm_task = tokio::spawn(async move { replay(&client, &warm_plan, &opts).await });

    tokio::time::sleep(Duration::from_secs(8)).await;
    env.cluster.kill(&old).unwrap();
    let killed_at = t0.elapsed().as_secs_f64() * 1000.0 - 20.0;
    let kill_instant = Instant::now();

    // Recovery: a new operational leader.
    let (leader, recovered_after) = loop {
        if let Some(l) = env.cluster.leader().await {
            break (l, kill_instant.elapsed());
        }
        if kill_instant.elapsed() > Duration::from_secs(30) {
            verdict(
                "C7",
                false,
                format!("killed {old}; no operational leader after 30s"),
            );
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    let leader_addr = env.cluster.address(&leader).unwrap();
    let recovered_at = Instant::now();

    // Merged set against the workers' own lists, retried while creations
    // and kills are in flight.
    let mut merged_equal = false;
    let mut recovered = BTreeSet::new();
    let mut diff = String::new();
    for attempt in 0..100 {
        let a = worker_union(&env).await;
        let m = leader_sandboxes(&leader_addr).await;
        let b = worker_union(&env).await;
        if attempt == 0 {
            recovered = a.clone();
        }
        if m == a || m == b {
            merged_equal = true;
            break;
        }
        diff = format!(
            "leader-only {:?}, workers-only {:?}",
            m.difference(&b).take(3).collect::<Vec<_>>(),
            b.difference(&m).take(3).collect::<Vec<_>>()
        );
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    // No kill for recovered sandboxes inside one stable window.
    tokio::time::sleep(
        (recovered_at + window - Duration::from_millis(800))
            .saturating_duration_since(Instant::now()),
    )
    .await;
    let now = worker_union(&env).await;
    let vanished: Vec<_> = recovered.difference(&now).collect();
    let m = metrics_of(&leader_addr).await;
    let recovered_fns: HashSet<&str> = recovered.iter().map(|(f, _)| f.as_str()).collect();
    let kills: f64 = recovered_fns
        .iter()
        .filter_map(|f| m.get(&format!("sandbox_kills_total{{function=\"{f}\"}}")))
        .sum();

    let cold_records = cold_task.await.unwrap();
    let warm_records = warm_task.await.unwrap();
    let warm_failures = warm_records.iter().filter(|r| !r.ok()).count();
    let resumed = cold_records
        .iter()
        .filter(|r| r.ok() && r.t_submit >= killed_at)
        .map(|r| r.t_response - killed_at)
        .reduce(f64::min);
    let cold_failures = cold_records.iter().filter(|r| !r.ok()).count();

    let ok = warm_failures == 0
        && resumed.is_some_and(|r| r <= 3000.0)
        && merged_equal
        && vanished.is_empty()
        && kills == 0.0;
    verdict(
        "C7",
        ok,
        format!(
            "killed {old}; {leader} operational after {:.0}ms; first cold start after kill done at +{}; warm failures {warm_failures}/{}; cold failures {cold_failures}/{}; merged set == worker union: {merged_equal} {diff}; {} recovered sandboxes, {} gone and {kills} kills within the stable window",
            recovered_after.as_secs_f64() * 1000.0,
            fmt_ms(resumed),
            warm_records.len(),
            cold_records.len(),
            recovered.len(),
            vanished.len()
        ),
    );
}

// ---------------------------------------------------------------- C8

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c08_data_plane_failover() {
    let _g = serial();
    let mut env = launch("c8", Topology::default()).await;
    let fns = names("c8", 30);
    for f in &fns {
        env.client.register(&warm(f, "echo", 1)).await.unwrap();
    }
    let refs: Vec<&str> = fns.iter().map(|f| &**f).collect();
    assert!(wait_endpoints(&env.client, &refs, 1, Duration::from_secs(30)).await);

    let plan = constant_rate(100.0, Duration::from_secs(20), &fns);
    let opts = ReplayOptions {
        timeout: Duration::from_secs(10),
        ..Default::default()
    };
    let client = env.client.clone();
    let t0 = Instant::now();
    let task = tokio::spawn(async move { replay(&client, &plan, &opts).await });
    tokio::time::sleep(Duration::from_secs(5)).await;
    let victim = "dp-1";
    env.cluster.kill(victim).unwrap();
    let killed_at = t0.elapsed().as_secs_f64() * 1000.0 - 20.0;
    let records = task.await.unwrap();

    let failed: Vec<&InvocationRecord> = records.iter().filter(|r| !r.ok()).collect();
    let last_failure = failed
        .iter()
        .map(|r| r.t_submit - killed_at)
        .reduce(f64::max);
    let stable = last_failure.is_none_or(|t| t <= 5000.0);

    env.cluster.restart(victim).unwrap();
    let addr = env.cluster.address(victim).unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut cached: BTreeSet<String> = BTreeSet::new();
    while Instant::now() < deadline {
        if let Some(s) = dp_status(&addr).await {
            if s.synced {
                cached = s.functions.into_iter().collect();
                break;
            }
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    let registered: BTreeSet<String> = env
        .client
        .functions()
        .await
        .unwrap()
        .into_iter()
        .map(|s| s.spec.name)
        .collect();
    let ok = stable && !registered.is_empty() && cached == registered;
    verdict(
        "C8",
        ok,
        format!(
            "killed {victim} at {:.1}s under 100/s: {} of {} invocations failed, last failure submitted at +{}; restarted replica caches {} functions, control plane has {}, equal: {}",
            killed_at / 1000.0,
            failed.len(),
            records.len(),
            fmt_ms(last_failure),
            cached.len(),
            registered.len(),
            cached == registered
        ),
    );
}

// ---------------------------------------------------------------- C9

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c09_worker_failure() {
    let _g = serial();
    let mut env = launch("c9", Topology::default()).await;
    let warm_fns: Vec<String> = (0..10).map(|i| format!("w-{i}")).collect();
    for f in &warm_fns {
        env.client.register(&warm(f, "echo", 2)).await.unwrap();
    }
    let mut slow = warm("slow", "sleep:3000", 10);
    slow.sched.stable_window = Duration::from_secs(60);
    env.client.register(&slow).await.unwrap();
    let mut all: Vec<&str> = warm_fns.iter().map(String::as_str).collect();
    all.push("slow");
    assert!(wait_endpoints(&env.client, &all[..10], 2, Duration::from_secs(30)).await);
    assert!(wait_endpoints(&env.client, &["slow"], 10, Duration::from_secs(30)).await);

    let mut index_of = HashMap::new();
    for w in env.cluster.names(Kind::Worker) {
        let m = metrics_of(&env.cluster.address(&w).unwrap()).await;
        index_of.insert(
            w,
            m.get("worker_index").copied().unwrap_or(-1.0) as i64 as u16,
        );
    }
    let victims: Vec<String> = env
        .cluster
        .names(Kind::Worker)
        .into_iter()
        .take(5)
        .collect();
    let killed: HashSet<u16> = victims.iter().map(|v| index_of[v]).collect();
    let dps = env.cluster.addresses(Kind::DataPlane);
    let before: Vec<SandboxRecord> = {
        let mut v = Vec::new();
        for d in &dps {
            if let Some(s) = dp_status(d).await {
                v.extend(s.endpoints.into_iter().flat_map(|e| e.endpoints));
            }
        }
        v
    };
    let affected: BTreeSet<u64> = before
        .iter()
        .filter(|r| killed.contains(&r.worker_index))
        .map(|r| r.id)
        .collect();
    let slow_on_victims = {
        let snaps = env.client.functions().await.unwrap();
        let s = snaps.iter().find(|s| s.spec.name == "slow").unwrap();
        s.endpoints
            .as_ref()
            .unwrap()
            .endpoints
            .iter()
            .filter(|r| killed.contains(&r.worker_index))
            .count()
    };

    // Ten in-flight invocations, one per slow sandbox.
    let mut inflight = Vec::new();
    for i in 0..10 {
        let c = env.client.clone();
        inflight.push(tokio::spawn(async move {
            c.invoke(
                "slow",
                "x",
                Some(&format!("slow-{i}")),
                Duration::from_secs(20),
            )
            .await
        }));
    }
    tokio::time::sleep(Duration::from_millis(500)).await;
    let kill_at = Instant::now();
    for v in &victims {
        env.cluster.kill(v).unwrap();
    }

    let mut gone_after = None;
    while kill_at.elapsed() < Duration::from_secs(10) {
        let mut stale = 0;
        for d in &dps {
            if let Some(s) = dp_status(d).await {
                stale += s
                    .endpoints
                    .iter()
                    .flat_map(|e| &e.endpoints)
                    .filter(|r| affected.contains(&r.id))
                    .count();
            }
        }
        if stale == 0 {
            gone_after = Some(kill_at.elapsed());
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    let mut slow_errors = 0;
    let mut slow_ok = 0;
    for t in inflight {
        match t.await.unwrap() {
            Ok(r) if r.ok() => slow_ok += 1,
            _ => slow_errors += 1,
        }
    }

    let replaced = wait_endpoints(&env.client, &all[..10], 2, Duration::from_secs(20)).await
        && wait_endpoints(&env.client, &["slow"], 10, Duration::from_secs(20)).await;
    let snaps = env.client.functions().await.unwrap();
    let on_dead: usize = snaps
        .iter()
        .filter_map(|s| s.endpoints.as_ref())
        .flat_map(|e| &e.endpoints)
        .filter(|r| killed.contains(&r.worker_index))
        .count();
    let fresh = snaps
        .iter()
        .filter_map(|s| s.endpoints.as_ref())
        .flat_map(|e| &e.endpoints)
        .filter(|r| !before.iter().any(|b| b.id == r.id))
        .count();

    let plan = constant_rate(
        50.0,
        Duration::from_secs(2),
        &warm_fns
            .iter()
            .map(|f| Arc::from(f.as_str()))
            .collect::<Vec<_>>(),
    );
    let after = replay(
        &env.client,
        &plan,
        &ReplayOptions {
            timeout: Duration::from_secs(10),
            ..Default::default()
        },
    )
    .await;
    let after_failures = after.iter().filter(|r| !r.ok()).count();

    let threshold = Duration::from_millis(1500);
    let ok = gone_after.is_some_and(|d| d <= 2 * threshold)
        && slow_errors == slow_on_victims
        && slow_ok == 10 - slow_on_victims
        && replaced
        && on_dead == 0
        && fresh > 0
        && after_failures == 0;
    verdict(
        "C9",
        ok,
        format!(
            "killed 5 of 10 workers; {} affected endpoints gone from all data planes after {:?} (bound {:?}); in-flight on killed workers {slow_on_victims}, errors {slow_errors}, ok {slow_ok}; {fresh} replacements, {on_dead} on dead workers; {after_failures}/{} later invocations failed",
            affected.len(),
            gone_after,
            2 * threshold,
            after.len()
        ),
    );
}

// ---------------------------------------------------------------- C10

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c10_async_at_least_once() {
    let _g = serial();
    let scratch = tempfile::tempdir().unwrap();
    let exec_log = scratch.path().join("exec.log");
    let topo = Topology::default().set("exec_log", exec_log.display());
    let mut env = launch("c10", topo).await;
    let mut spec = warm("sleepy", "sleep:300", 10);
    spec.sched.queue_timeout = Duration::from_secs(10);
    env.client.register(&spec).await.unwrap();
    assert!(wait_endpoints(&env.client, &["sleepy"], 10, Duration::from_secs(20)).await);

    // The victim is a worker hosting sleepy sandboxes.
    let mut victim = None;
    for w in env.cluster.names(Kind::Worker) {
        if worker_list(&env.cluster.address(&w).unwrap())
            .await
            .is_some_and(|l| !l.is_empty())
        {
            victim = Some(w);
            break;
        }
    }
    let victim = victim.unwrap();

    let mut ids = Vec::new();
    let mut rejected = 0;
    let start = Instant::now();
    let mut killed = false;
    for i in 0..1000u32 {
        let due = start + Duration::from_millis(20 * i as u64);
        tokio::time::sleep_until(due.into()).await;
        if !killed && i == 400 {
            env.cluster.kill(&victim).unwrap();
            killed = true;
        }
        match env.client.submit_async("sleepy", format!("p{i}")).await {
            Ok(id) => ids.push(id),
            Err(_) => rejected += 1,
        }
    }

    let deadline = Instant::now() + Duration::from_secs(120);
    let mut final_state: HashMap<String, (AsyncStatus, u32)> = HashMap::new();
    while Instant::now() < deadline && final_state.len() < ids.len() {
        for id in &ids {
            if final_state.contains_key(id) {
                continue;
            }
            if let Ok(Some(env)) = env.client.async_status(id).await {
                if matches!(env.status, AsyncStatus::Done | AsyncStatus::Failed) {
                    final_state.insert(id.clone(), (env.status, env.attempts));
                }
            }
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }

    let mut executions: HashMap<String, usize> = HashMap::new();
    for line in std::fs::read_to_string(&exec_log)
        .unwrap_or_default()
        .lines()
    {
        if let Some((rid, _)) = line.split_once(' ') {
            *executions.entry(rid.to_string()).or_default() += 1;
        }
    }
    let done: Vec<&String> = ids
        .iter()
        .filter(|id| matches!(final_state.get(*id), Some((AsyncStatus::Done, _))))
        .collect();
    let failed: Vec<&String> = ids
        .iter()
        .filter(|id| matches!(final_state.get(*id), Some((AsyncStatus::Failed, _))))
        .collect();
    let unfinished = ids.len() - done.len() - failed.len();
    let failed_exhausted = failed.iter().all(|id| final_state[*id].1 == 3);
    let done_executed = done
        .iter()
        .all(|id| executions.get(*id).is_some_and(|n| *n >= 1));
    let retried: Vec<&String> = ids
        .iter()
        .filter(|id| final_state.get(*id).is_some_and(|(_, a)| *a > 1))
        .collect();
    let duplicates = ids
        .iter()
        .filter(|id| executions.get(*id).is_some_and(|n| *n >= 2))
        .count();
    let dup_retried = retried
        .iter()
        .filter(|id| executions.get(**id).is_some_and(|n| *n >= 2))
        .count();

    let ok = unfinished == 0
        && failed_exhausted
        && done_executed
        && dup_retried >= 1
        && ids.len() + rejected == 1000;
    verdict(
        "C10",
        ok,
        format!(
            "{} acked ({rejected} rejected), killed {victim} after 400 submissions: {} done, {} failed after 3 attempts: {failed_exhausted}, {unfinished} unfinished; every done request executed: {done_executed}; {} retried, {dup_retried} of them executed twice or more ({duplicates} duplicates overall)",
            ids.len(),
            done.len(),
            failed.len(),
            retried.len()
        ),
    );
}

// ---------------------------------------------------------------- C11

#[test]
fn c11_codec_bit_exact() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0u64;
    for _ in 0..1_000_000 {
        let r = SandboxRecord {
            id: rng.gen(),
            ip: Ipv4Addr::from(rng.gen::<u32>()),
            port: rng.gen(),
            worker_index: rng.gen(),
        };
        // Independent builder: big-endian fields by shifting.
        let mut want = Vec::with_capacity(16);
        for s in (0..8).rev() {
            want.push((r.id >> (s * 8)) as u8);
        }
        let ip = u32::from(r.ip);
        for s in (0..4).rev() {
            want.push((ip >> (s * 8)) as u8);
        }
        want.push((r.port >> 8) as u8);
        want.push(r.port as u8);
        want.push((r.worker_index >> 8) as u8);
        want.push(r.worker_index as u8);
        let got = r.encode();
        if got.len() != 16 || got[..] != want[..] || SandboxRecord::decode(&got) != Ok(r) {
            mismatches += 1;
        }
    }
    let short =
        SandboxRecord::decode(&[0u8; 15]).is_err() && SandboxRecord::decode(&[0u8; 17]).is_err();
    verdict(
        "C11",
        SANDBOX_RECORD_LEN == 16 && mismatches == 0 && short,
        format!("1000000 random records, {mismatches} differ from the byte builder or fail to round-trip; 15/17-byte inputs rejected: {short}"),
    );
}

// ---------------------------------------------------------------- C12

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c12_trace_replay_end_to_end() {
    let _g = serial();
    let trace = generate(&GenerateOptions {
        functions: 50,
        duration: Duration::from_secs(600),
        seed: 12,
        rate_per_minute: (1.0, 20.0),
        exec_median_ms: 20.0,
        exec_sigma: 0.5,
        ..GenerateOptions::default()
    })
    .unwrap();
    let per_ms = baton_worker::sandbox::calibrate();
    let specs: Vec<FunctionSpec> = trace
        .functions
        .iter()
        .map(|f| trace_spec(&f.name, f.exec_ms, f.memory_mb, per_ms))
        .collect();
    let mut reference = HashMap::new();
    for (f, s) in trace.functions.iter().zip(&specs) {
        reference.insert(
            f.name.clone(),
            exec_reference(Path::new(BIN), &s.image, 31601)
                .await
                .unwrap(),
        );
    }

    let topo = Topology {
        runtime: baton_core::config::RuntimeKind::Process,
        ..small(3, 3, 4)
    };
    let env = launch("c12", topo).await;
    register_all(&env.client, &specs).await.unwrap();
    let planned: Vec<Planned> = plan(&trace);
    let opts = ReplayOptions {
        timeout: Duration::from_secs(60),
        exec_reference: reference,
        ..Default::default()
    };
    let records = replay(&env.client, &planned, &opts).await;
    let report = Report::build(&records, 0.0, 60);
    let out = env.path.join("report");
    let summary = report.write(&out).unwrap();
    for line in summary.lines() {
        note(line);
    }
    let p50 = report.function_slowdown.p50;
    let ok =
        report.failure_rate < 0.01 && report.functions.len() == 50 && p50.is_some_and(|p| p <= 3.0);
    verdict(
        "C12",
        ok,
        format!(
            "{} invocations of 50 functions over 10 min (process runtime): failure rate {:.4}, per-function geomean slowdown p50 {:?} p99 {:?}",
            report.invocations, report.failure_rate, p50, report.function_slowdown.p99
        ),
    );
}
