//! Local multi-process clusters for experiments and fault injection.
//!
//! Every component runs as its own `baton` process in its own process
//! group, so killing a worker also kills the sandboxes it spawned.

use std::collections::BTreeMap;
use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tracing::info;

use baton_core::config::{ConfigDoc, RuntimeKind};
use baton_core::metrics::parse_metrics;

use crate::client::cp_status;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    ControlPlane,
    DataPlane,
    Worker,
    Frontend,
}

impl Kind {
    fn subcommand(self) -> &'static str {
        match self {
            Kind::ControlPlane => "control-plane",
            Kind::DataPlane => "data-plane",
            Kind::Worker => "worker",
            Kind::Frontend => "frontend",
        }
    }
}

/// Shape of a local cluster plus configuration shared by all components.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub control_planes: usize,
    pub data_planes: usize,
    pub workers: usize,
    pub frontend: bool,
    pub runtime: RuntimeKind,
    /// First component port; components take consecutive ports.
    pub base_port: u16,
    /// Worker `i` leases sandbox ports from
    /// `sandbox_port_base + i * sandbox_ports_per_worker`.
    pub sandbox_port_base: u16,
    pub sandbox_ports_per_worker: u16,
    /// Component configuration keys, e.g. `stable_window = 5s`.
    pub settings: Vec<(String, String)>,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            control_planes: 3,
            data_planes: 3,
            workers: 10,
            frontend: true,
            runtime: RuntimeKind::Stub,
            base_port: 12000,
            sandbox_port_base: 20000,
            sandbox_ports_per_worker: 1200,
            settings: Vec::new(),
        }
    }
}

impl Topology {
    /// Parses a topology document: the keys `control_planes`,
    /// `data_planes`, `workers`, `frontend`, `runtime`, `base_port`,
    /// `sandbox_port_base` and `sandbox_ports_per_worker`; every other key
    /// is component configuration.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut t = Topology::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`", i + 1)
            };
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .with_context(|| format!("line {}: {k} must be a number", i + 1))
            };
            match k {
                "control_planes" => t.control_planes = num(v)?,
                "data_planes" => t.data_planes = num(v)?,
                "workers" => t.workers = num(v)?,
                "frontend" => {
                    t.frontend = v
                        .parse()
                        .with_context(|| format!("line {}: frontend must be a boolean", i + 1))?
                }
                "runtime" => {
                    t.runtime = v.parse().map_err(|_| {
                        anyhow::anyhow!("line {}: runtime must be process or stub", i + 1)
                    })?
                }
                "base_port" => t.base_port = num(v)? as u16,
                "sandbox_port_base" => t.sandbox_port_base = num(v)? as u16,
                "sandbox_ports_per_worker" => t.sandbox_ports_per_worker = num(v)? as u16,
                _ => t.settings.push((k.to_string(), v.to_string())),
            }
        }
        t.check()?;
        Ok(t)
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.settings.retain(|(k, _)| k != key);
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    fn check(&self) -> anyhow::Result<()> {
        if self.control_planes == 0 || self.data_planes == 0 {
            bail!("a cluster needs at least one control plane and one data plane");
        }
        let top = self.sandbox_port_base as u64
            + self.workers as u64 * self.sandbox_ports_per_worker as u64;
        if top > 65535 {
            bail!("sandbox port ranges exceed 65535");
        }
        let components = (self.control_planes + self.data_planes + self.workers + 1) as u64;
        if self.base_port as u64 + components > self.sandbox_port_base as u64 && self.workers > 0 {
            bail!("component ports overlap the sandbox port ranges");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub name: String,
    pub kind: Kind,
    pub address: String,
    pub args: Vec<String>,
    pub pid: Option<u32>,
}

/// Persistent description of a cluster started by `baton cluster up`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterState {
    pub bin: PathBuf,
    pub dir: PathBuf,
    pub components: Vec<ComponentInfo>,
}

impl ClusterState {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("cluster.json")
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(Self::path(dir))
            .with_context(|| format!("no cluster state in {}", dir.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self) -> anyhow::Result<()> {
        std::fs::write(Self::path(&self.dir), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

struct Running {
    info: ComponentInfo,
    child: Option<Child>,
}

/// A running cluster. Dropping it kills every component unless detached.
pub struct LocalCluster {
    bin: PathBuf,
    dir: PathBuf,
    components: Vec<Running>,
    detached: bool,
}

fn signal_group(pid: u32, sig: libc::c_int) {
    // SAFETY: plain syscalls on a pid we spawned into its own group.
    unsafe {
        libc::kill(-(pid as libc::pid_t), sig);
    }
}

fn signal_pid(pid: u32, sig: libc::c_int) {
    // SAFETY: see `signal_group`.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

impl LocalCluster {
    /// Writes the shared configuration into `dir` and launches every
    /// component of `topo` with `bin`.
    pub fn start(bin: &Path, dir: &Path, topo: &Topology) -> anyhow::Result<Self> {
        topo.check()?;
        std::fs::create_dir_all(dir)?;
        let mut port = topo.base_port;
        let mut next = || {
            let p = port;
            port += 1;
            format!("127.0.0.1:{p}")
        };
        let cps: Vec<String> = (0..topo.control_planes).map(|_| next()).collect();
        let dps: Vec<String> = (0..topo.data_planes).map(|_| next()).collect();
        let fe = topo.frontend.then(&mut next);
        let workers: Vec<String> = (0..topo.workers).map(|_| next()).collect();

        let mut doc = String::new();
        doc += &format!("replicas = {}\n", cps.join(","));
        doc += &format!("dataplanes = {}\n", dps.join(","));
        if let Some(fe) = &fe {
            doc += &format!("frontends = {fe}\n");
        }
        let runtime = match topo.runtime {
            RuntimeKind::Process => "process",
            RuntimeKind::Stub => "stub",
        };
        doc += &format!("runtime = {runtime}\n");
        for (k, v) in &topo.settings {
            doc += &format!("{k} = {v}\n");
        }
        // Fail here rather than in every component.
        ConfigDoc::parse(&doc)?.into_config()?;
        let conf = dir.join("cluster.conf");
        std::fs::write(&conf, &doc)?;
        let conf = conf.to_string_lossy().to_string();

        let mut infos = Vec::new();
        let base = |kind: Kind| {
            vec![
                kind.subcommand().to_string(),
                "--config".to_string(),
                conf.clone(),
            ]
        };
        for (i, addr) in cps.iter().enumerate() {
            let mut args = base(Kind::ControlPlane);
            for s in [
                format!("listen={addr}"),
                format!("replica_id={i}"),
                format!("data_dir={}", dir.join(format!("cp-{i}")).display()),
                format!("seed={}", 1000 + i),
            ] {
                args.extend(["--set".to_string(), s]);
            }
            infos.push(ComponentInfo {
                name: format!("cp-{i}"),
                kind: Kind::ControlPlane,
                address: addr.clone(),
                args,
                pid: None,
            });
        }
        for (i, addr) in dps.iter().enumerate() {
            let mut args = base(Kind::DataPlane);
            args.extend(["--set".to_string(), format!("listen={addr}")]);
            args.extend([
                "--async-log".to_string(),
                dir.join(format!("dp-{i}-async.log")).display().to_string(),
            ]);
            infos.push(ComponentInfo {
                name: format!("dp-{i}"),
                kind: Kind::DataPlane,
                address: addr.clone(),
                args,
                pid: None,
            });
        }
        if let Some(addr) = &fe {
            let mut args = base(Kind::Frontend);
            args.extend(["--set".to_string(), format!("listen={addr}")]);
            infos.push(ComponentInfo {
                name: "fe".into(),
                kind: Kind::Frontend,
                address: addr.clone(),
                args,
                pid: None,
            });
        }
        for (i, addr) in workers.iter().enumerate() {
            let lo = topo.sandbox_port_base + i as u16 * topo.sandbox_ports_per_worker;
            let hi = lo + topo.sandbox_ports_per_worker - 1;
            let mut args = base(Kind::Worker);
            for s in [
                format!("listen={addr}"),
                format!("name=worker-{i}"),
                format!("port_range={lo}-{hi}"),
            ] {
                args.extend(["--set".to_string(), s]);
            }
            if topo.runtime == RuntimeKind::Process {
                args.extend([
                    "--set".to_string(),
                    format!("sandbox_bin={}", bin.display()),
                ]);
            }
            infos.push(ComponentInfo {
                name: format!("worker-{i}"),
                kind: Kind::Worker,
                address: addr.clone(),
                args,
                pid: None,
            });
        }

        let mut cluster = LocalCluster {
            bin: bin.to_path_buf(),
            dir: dir.to_path_buf(),
            components: infos
                .into_iter()
                .map(|info| Running { info, child: None })
                .collect(),
            detached: false,
        };
        let names: Vec<String> = cluster
            .components
            .iter()
            .map(|c| c.info.name.clone())
            .collect();
        for name in names {
            cluster.spawn(&name)?;
        }
        Ok(cluster)
    }

    /// Re-attaches to a cluster started earlier; its processes are not
    /// children of this one.
    pub fn attach(state: ClusterState) -> Self {
        Self {
            bin: state.bin,
            dir: state.dir,
            components: state
                .components
                .into_iter()
                .map(|info| Running { info, child: None })
                .collect(),
            detached: true,
        }
    }

    pub fn state(&self) -> ClusterState {
        ClusterState {
            bin: self.bin.clone(),
            dir: self.dir.clone(),
            components: self.components.iter().map(|c| c.info.clone()).collect(),
        }
    }

    /// Leaves the processes running when this handle is dropped.
    pub fn detach(&mut self) {
        self.detached = true;
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn get(&mut self, name: &str) -> anyhow::Result<&mut Running> {
        self.components
            .iter_mut()
            .find(|c| c.info.name == name)
            .with_context(|| format!("unknown component {name}"))
    }

    fn spawn(&mut self, name: &str) -> anyhow::Result<()> {
        let bin = self.bin.clone();
        let log = File::options()
            .create(true)
            .append(true)
            .open(self.dir.join(format!("{name}.log")))?;
        let c = self.get(name)?;
        let child = Command::new(&bin)
            .args(&c.info.args)
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .env(
                "RUST_LOG",
                std::env::var("BATON_LOG").unwrap_or_else(|_| "warn".into()),
            )
            .process_group(0)
            .spawn()
            .with_context(|| format!("spawning {name}"))?;
        c.info.pid = Some(child.id());
        c.child = Some(child);
        Ok(())
    }

    pub fn names(&self, kind: Kind) -> Vec<String> {
        self.components
            .iter()
            .filter(|c| c.info.kind == kind)
            .map(|c| c.info.name.clone())
            .collect()
    }

    pub fn addresses(&self, kind: Kind) -> Vec<String> {
        self.components
            .iter()
            .filter(|c| c.info.kind == kind)
            .map(|c| c.info.address.clone())
            .collect()
    }

    pub fn address(&self, name: &str) -> Option<String> {
        self.components
            .iter()
            .find(|c| c.info.name == name)
            .map(|c| c.info.address.clone())
    }

    /// Where invocations go: the front-end if there is one.
    pub fn target(&self) -> String {
        self.addresses(Kind::Frontend)
            .into_iter()
            .next()
            .unwrap_or_else(|| self.addresses(Kind::DataPlane)[0].clone())
    }

    pub fn is_running(&self, name: &str) -> bool {
        self.components
            .iter()
            .any(|c| c.info.name == name && c.info.pid.is_some())
    }

    /// SIGKILL to the component's whole process group.
    pub fn kill(&mut self, name: &str) -> anyhow::Result<()> {
        let c = self.get(name)?;
        if let Some(pid) = c.info.pid.take() {
            signal_group(pid, libc::SIGKILL);
            if let Some(mut child) = c.child.take() {
                let _ = child.wait();
            }
            info!(component = name, "killed");
        }
        Ok(())
    }

    pub fn restart(&mut self, name: &str) -> anyhow::Result<()> {
        self.kill(name)?;
        self.spawn(name)
    }

    /// Freezes the component process (not its sandboxes), which looks like
    /// a network partition to everyone else.
    pub fn pause(&mut self, name: &str) -> anyhow::Result<()> {
        let pid = self
            .get(name)?
            .info
            .pid
            .context("component is not running")?;
        signal_pid(pid, libc::SIGSTOP);
        Ok(())
    }

    pub fn resume(&mut self, name: &str) -> anyhow::Result<()> {
        let pid = self
            .get(name)?
            .info
            .pid
            .context("component is not running")?;
        signal_pid(pid, libc::SIGCONT);
        Ok(())
    }

    /// Name of the current control plane leader, if any replica knows one.
    pub async fn leader(&self) -> Option<String> {
        for c in self
            .components
            .iter()
            .filter(|c| c.info.kind == Kind::ControlPlane && c.info.pid.is_some())
        {
            if let Ok(s) = cp_status(&c.info.address).await {
                if s.is_leader && s.operational {
                    return Some(c.info.name.clone());
                }
            }
        }
        None
    }

    /// Sum of persistent store writes over all running control planes.
    pub async fn store_writes(&self) -> u64 {
        let mut total = 0;
        for c in self
            .components
            .iter()
            .filter(|c| c.info.kind == Kind::ControlPlane && c.info.pid.is_some())
        {
            if let Ok(s) = cp_status(&c.info.address).await {
                total += s.store_writes;
            }
        }
        total
    }

    /// Metrics of the leader's `/metrics` page.
    pub async fn leader_metrics(&self) -> Option<BTreeMap<String, f64>> {
        let leader = self.leader().await?;
        let addr = self.address(&leader)?;
        let text = reqwest::get(format!("http://{addr}/metrics"))
            .await
            .ok()?
            .text()
            .await
            .ok()?;
        Some(parse_metrics(&text))
    }

    /// Waits for an operational leader that sees every worker and data
    /// plane, and for every data plane to report itself synced.
    pub async fn wait_ready(&self, limit: Duration) -> anyhow::Result<()> {
        let deadline = Instant::now() + limit;
        let workers = self.addresses(Kind::Worker).len() as f64;
        let dps = self.addresses(Kind::DataPlane);
        let http = reqwest::Client::new();
        loop {
            let mut ready = false;
            if let Some(m) = self.leader_metrics().await {
                let seen_workers = m.get("workers").copied().unwrap_or(0.0)
                    - m.get("workers_dead").copied().unwrap_or(0.0);
                let seen_dps = m.get("dataplanes_live").copied().unwrap_or(0.0);
                ready = seen_workers >= workers && seen_dps >= dps.len() as f64;
            }
            if ready {
                let mut synced = true;
                for dp in &dps {
                    synced &= matches!(http.get(format!("http://{dp}/health")).send().await, Ok(r) if r.status().is_success());
                }
                if synced {
                    return Ok(());
                }
            }
            if Instant::now() > deadline {
                bail!(
                    "cluster not ready after {limit:?}; see logs in {}",
                    self.dir.display()
                );
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }

    pub fn shutdown(&mut self) {
        for c in &mut self.components {
            if let Some(pid) = c.info.pid.take() {
                signal_group(pid, libc::SIGKILL);
                if let Some(mut child) = c.child.take() {
                    let _ = child.wait();
                }
            }
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        if !self.detached {
            self.shutdown();
        }
    }
}
