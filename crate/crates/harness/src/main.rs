use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;
use tracing::{info, warn};

use baton_core::config::{Config, ConfigDoc};
use baton_harness::calibrate::exec_reference;
use baton_harness::client::ClusterClient;
use baton_harness::cluster::{ClusterState, Kind, LocalCluster, Topology};
use baton_harness::faults::{parse_schedule, run_schedule, AppliedFault};
use baton_harness::ingest::{ingest, IngestOptions};
use baton_harness::replay::{
    plan, register_all, replay, sweep, trace_spec, write_sweep, ReplayOptions, SweepMode,
    SweepOptions,
};
use baton_harness::report::{read_records, write_records, Report};
use baton_harness::trace::{generate, GenerateOptions, Profile, Trace};

fn duration(s: &str) -> Result<Duration, String> {
    baton_core::time::parse_duration(s).ok_or_else(|| format!("bad duration {s:?}"))
}

#[derive(Parser)]
#[command(
    name = "baton",
    version,
    about = "Desk-scale serverless cluster manager"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic trace.
    Generate(GenerateArgs),
    /// Convert Azure-format CSVs into a trace.
    Ingest(IngestArgs),
    /// Register a trace's functions and replay it open-loop.
    Replay(ReplayArgs),
    /// Step a constant cold or warm load over rates.
    Sweep(SweepArgs),
    /// Apply a fault schedule to a running local cluster.
    Faults(FaultsArgs),
    /// Summarize invocation records.
    Report(ReportArgs),
    /// Start or stop a local cluster.
    Cluster {
        #[command(subcommand)]
        command: ClusterCmd,
    },
    /// Run a control plane replica.
    ControlPlane(NodeArgs),
    /// Run a data plane replica.
    DataPlane {
        #[command(flatten)]
        node: NodeArgs,
        /// Journal of accepted async invocations.
        #[arg(long)]
        async_log: Option<PathBuf>,
    },
    /// Run a worker daemon.
    Worker(NodeArgs),
    /// Run the front-end router.
    Frontend(NodeArgs),
    /// Serve one sandbox (spawned by the process runtime).
    Sandbox(SandboxArgs),
}

#[derive(Args)]
struct NodeArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set listen=127.0.0.1:9000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl NodeArgs {
    fn load(&self) -> anyhow::Result<Config> {
        let text = match &self.config {
            Some(p) => {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => String::new(),
        };
        let mut doc = ConfigDoc::parse(&text)?;
        doc.apply_overrides(self.overrides.iter().map(String::as_str))?;
        Ok(doc.into_config()?)
    }
}

#[derive(Args)]
struct SandboxArgs {
    #[arg(long)]
    port: u16,
    #[arg(long)]
    behavior: String,
    #[arg(long, default_value_t = 0)]
    id: u64,
    #[arg(long)]
    exec_log: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 50)]
    functions: usize,
    #[arg(long, default_value = "5m", value_parser = duration)]
    duration: Duration,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `poisson` or `burst:N@T`.
    #[arg(long, default_value = "poisson")]
    profile: String,
    #[arg(long, default_value_t = 50.0)]
    exec_median_ms: f64,
    #[arg(long, default_value_t = 0.6)]
    exec_sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    min_rate: f64,
    #[arg(long, default_value_t = 60.0)]
    max_rate: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    invocations: PathBuf,
    #[arg(long)]
    durations: PathBuf,
    #[arg(long)]
    memory: PathBuf,
    /// First minute of the day to keep.
    #[arg(long, default_value_t = 0)]
    window_start: usize,
    /// Minutes to keep.
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    max_functions: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct Endpoints {
    /// Directory of a cluster started with `baton cluster up`.
    #[arg(long)]
    cluster_dir: Option<PathBuf>,
    /// Control plane replicas, comma separated.
    #[arg(long, value_delimiter = ',')]
    control: Vec<String>,
    /// Where invocations go: a front-end or data plane address.
    #[arg(long)]
    target: Option<String>,
}

impl Endpoints {
    fn client(&self) -> anyhow::Result<ClusterClient> {
        if let Some(dir) = &self.cluster_dir {
            let state = ClusterState::load(dir)?;
            let cluster = LocalCluster::attach(state);
            let target = self.target.clone().unwrap_or_else(|| cluster.target());
            return Ok(ClusterClient::new(
                cluster.addresses(Kind::ControlPlane),
                target,
            ));
        }
        let Some(target) = &self.target else {
            bail!("--target or --cluster-dir is required")
        };
        if self.control.is_empty() {
            bail!("--control or --cluster-dir is required");
        }
        Ok(ClusterClient::new(self.control.clone(), target.clone()))
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    endpoints: Endpoints,
    /// Output directory for records.csv and the report.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "60s", value_parser = duration)]
    timeout: Duration,
    /// Measure each function on a dedicated sandbox instead of trusting the
    /// trace's execution times.
    #[arg(long)]
    calibrate: bool,
    /// Port for the calibration sandbox.
    #[arg(long, default_value_t = 31500)]
    calibrate_port: u16,
    /// Excluded from the report.
    #[arg(long, default_value = "0s", value_parser = duration)]
    warmup: Duration,
    #[arg(long, default_value_t = 10)]
    bucket_secs: u64,
    /// Fault schedule applied during the replay (needs --cluster-dir).
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    endpoints: Endpoints,
    #[arg(long, default_value = "cold")]
    mode: SweepMode,
    /// Rates in invocations per second.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,300,400")]
    rates: Vec<f64>,
    #[arg(long, default_value = "5s", value_parser = duration)]
    step: Duration,
    #[arg(long, default_value = "30s", value_parser = duration)]
    timeout: Duration,
    #[arg(long, default_value = "echo")]
    image: String,
    #[arg(long, default_value = "sweep")]
    prefix: String,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FaultsArgs {
    #[arg(long)]
    cluster_dir: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    /// CSV log of applied faults.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "0s", value_parser = duration)]
    warmup: Duration,
    #[arg(long, default_value_t = 10)]
    bucket_secs: u64,
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Spawn a cluster described by a topology file and leave it running.
    Up {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "60s", value_parser = duration)]
        ready_timeout: Duration,
    },
    /// Kill every component of a cluster.
    Down {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(run(cli.command))
}

async fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Generate(a) => {
            let opts = GenerateOptions {
                functions: a.functions,
                duration: a.duration,
                seed: a.seed,
                profile: a.profile.parse::<Profile>()?,
                rate_per_minute: (a.min_rate, a.max_rate),
                exec_median_ms: a.exec_median_ms,
                exec_sigma: a.exec_sigma,
                ..GenerateOptions::default()
            };
            let trace = generate(&opts)?;
            trace.save(&a.out)?;
            println!(
                "{} functions, {} invocations -> {}",
                trace.functions.len(),
                trace.invocations(),
                a.out.display()
            );
        }
        Cmd::Ingest(a) => {
            let opts = IngestOptions {
                window_start_min: a.window_start,
                window_len_min: a.window_len,
                max_functions: a.max_functions,
                seed: a.seed,
            };
            let trace = ingest(&a.invocations, &a.durations, &a.memory, &opts)?;
            trace.save(&a.out)?;
            println!(
                "{} functions, {} invocations -> {}",
                trace.functions.len(),
                trace.invocations(),
                a.out.display()
            );
        }
        Cmd::Replay(a) => replay_cmd(a).await?,
        Cmd::Sweep(a) => {
            let client = a.endpoints.client()?;
            let opts = SweepOptions {
                mode: a.mode,
                rates: a.rates,
                step: a.step,
                timeout: a.timeout,
                image: a.image,
                prefix: a.prefix,
                ..SweepOptions::default()
            };
            let steps = sweep(&client, &opts).await?;
            write_sweep(&a.out, &steps)?;
            let ms = |v: Option<f64>| {
                v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.2} ms"))
            };
            for s in &steps {
                println!(
                    "rate {:>7.1}/s  achieved {:>7.1}/s  p50 {:>10}  p99 {:>10}  failed {}",
                    s.rate,
                    s.achieved_rps,
                    ms(s.p50_ms),
                    ms(s.p99_ms),
                    s.failed
                );
            }
        }
        Cmd::Faults(a) => {
            let schedule = parse_schedule(&std::fs::read_to_string(&a.schedule)?)?;
            let mut cluster = LocalCluster::attach(ClusterState::load(&a.cluster_dir)?);
            let applied = run_schedule(&mut cluster, &schedule, Instant::now()).await;
            cluster.state().save()?;
            let applied = applied?;
            write_faults(a.out.as_deref(), &applied)?;
        }
        Cmd::Report(a) => {
            let records = read_records(&a.records)?;
            if records.is_empty() {
                bail!("{} holds no records", a.records.display());
            }
            let report = Report::build(&records, a.warmup.as_secs_f64() * 1000.0, a.bucket_secs);
            print!("{}", report.write(&a.out)?);
        }
        Cmd::Cluster {
            command:
                ClusterCmd::Up {
                    topology,
                    dir,
                    ready_timeout,
                },
        } => {
            let topo = match topology {
                Some(p) => Topology::parse(&std::fs::read_to_string(&p)?)?,
                None => Topology::default(),
            };
            let bin = std::env::current_exe()?;
            let mut cluster = LocalCluster::start(&bin, &dir, &topo)?;
            cluster.wait_ready(ready_timeout).await?;
            cluster.state().save()?;
            cluster.detach();
            println!(
                "control planes: {}",
                cluster.addresses(Kind::ControlPlane).join(",")
            );
            println!(
                "data planes:    {}",
                cluster.addresses(Kind::DataPlane).join(",")
            );
            println!("target:         {}", cluster.target());
        }
        Cmd::Cluster {
            command: ClusterCmd::Down { dir },
        } => {
            let mut cluster = LocalCluster::attach(ClusterState::load(&dir)?);
            cluster.shutdown();
            std::fs::remove_file(ClusterState::path(&dir))?;
        }
        Cmd::ControlPlane(a) => {
            let cfg = a.load()?;
            let listener = TcpListener::bind(cfg.node.listen).await?;
            let cp = baton_control::ControlPlane::start(cfg, listener).await?;
            info!(addr = %cp.local_addr(), "control plane up");
            terminated().await;
            cp.shutdown();
        }
        Cmd::DataPlane { node, async_log } => {
            let cfg = node.load()?;
            let listener = TcpListener::bind(cfg.node.listen).await?;
            let dp = baton_dataplane::DataPlane::start(cfg, listener, async_log).await?;
            info!(addr = %dp.local_addr(), "data plane up");
            terminated().await;
            dp.shutdown();
        }
        Cmd::Worker(a) => {
            let cfg = a.load()?;
            let listener = TcpListener::bind(cfg.node.listen).await?;
            let worker = baton_worker::Worker::start(cfg, listener).await?;
            info!(addr = %worker.local_addr(), "worker up");
            terminated().await;
            worker.shutdown().await;
        }
        Cmd::Frontend(a) => {
            let cfg = a.load()?;
            let listener = TcpListener::bind(cfg.node.listen).await?;
            let fe = baton_frontend::Frontend::start(cfg.frontend, listener).await?;
            info!(addr = %fe.local_addr(), "front-end up");
            terminated().await;
            fe.shutdown();
        }
        Cmd::Sandbox(a) => sandbox(a).await?,
    }
    Ok(())
}

async fn terminated() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}

async fn sandbox(a: SandboxArgs) -> anyhow::Result<()> {
    use baton_worker::sandbox::{serve, Behavior, ExecLog};
    let behavior: Behavior = a.behavior.parse()?;
    let log = match &a.exec_log {
        Some(p) => Some(std::sync::Arc::new(ExecLog::open(p)?)),
        None => None,
    };
    let listener = TcpListener::bind((a.host.as_str(), a.port)).await?;
    // SAFETY: getppid has no preconditions.
    let parent = unsafe { libc::getppid() };
    let orphaned = async move {
        loop {
            tokio::time::sleep(Duration::from_millis(200)).await;
            // SAFETY: as above.
            if unsafe { libc::getppid() } != parent {
                break;
            }
        }
    };
    let stop = async move {
        tokio::select! {
            _ = orphaned => {}
            _ = terminated() => {}
        }
    };
    serve(listener, behavior, a.id, log, stop).await?;
    Ok(())
}

fn write_faults(out: Option<&Path>, applied: &[AppliedFault]) -> anyhow::Result<()> {
    let mut text = String::from("at_ms,action,component\n");
    for f in applied {
        text += &format!(
            "{:.1},{},{}\n",
            f.at_ms,
            serde_json::to_value(f.action)?.as_str().unwrap_or("?"),
            f.component
        );
    }
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

async fn replay_cmd(a: ReplayArgs) -> anyhow::Result<()> {
    let trace = Trace::load(&a.trace)?;
    let client = a.endpoints.client()?;
    let per_ms = baton_worker::sandbox::calibrate();
    let specs: Vec<_> = trace
        .functions
        .iter()
        .map(|f| trace_spec(&f.name, f.exec_ms, f.memory_mb, per_ms))
        .collect();

    let mut exec = HashMap::new();
    if a.calibrate {
        let bin = std::env::current_exe()?;
        for (f, spec) in trace.functions.iter().zip(&specs) {
            let ms = exec_reference(&bin, &spec.image, a.calibrate_port).await?;
            exec.insert(f.name.clone(), ms);
        }
    } else {
        exec.extend(trace.functions.iter().map(|f| (f.name.clone(), f.exec_ms)));
    }

    let registration = register_all(&client, &specs).await?;
    let mean_reg = registration.iter().sum::<f64>() / registration.len().max(1) as f64;
    info!(functions = specs.len(), mean_ms = mean_reg, "registered");

    let planned = plan(&trace);
    let opts = ReplayOptions {
        timeout: a.timeout,
        exec_reference: exec,
        ..ReplayOptions::default()
    };
    let (records, applied) = match &a.faults {
        Some(path) => {
            let Some(dir) = &a.endpoints.cluster_dir else {
                bail!("--faults needs --cluster-dir")
            };
            let schedule = parse_schedule(&std::fs::read_to_string(path)?)?;
            let mut cluster = LocalCluster::attach(ClusterState::load(dir)?);
            let start = Instant::now();
            let (records, applied) = tokio::join!(
                replay(&client, &planned, &opts),
                run_schedule(&mut cluster, &schedule, start)
            );
            cluster.state().save()?;
            (
                records,
                applied.unwrap_or_else(|e| {
                    warn!(error = %e, "fault schedule aborted");
                    Vec::new()
                }),
            )
        }
        None => (replay(&client, &planned, &opts).await, Vec::new()),
    };

    std::fs::create_dir_all(&a.out)?;
    write_records(&a.out.join("records.csv"), &records)?;
    if !applied.is_empty() {
        write_faults(Some(&a.out.join("faults.csv")), &applied)?;
    }
    let report = Report::build(&records, a.warmup.as_secs_f64() * 1000.0, a.bucket_secs);
    print!("{}", report.write(&a.out)?);
    println!(
        "registration mean {mean_reg:.2} ms over {} functions",
        registration.len()
    );
    Ok(())
}
