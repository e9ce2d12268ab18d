//! Flat `key = value` configuration shared by every component.
//!
//! One document configures a whole cluster; each component reads the keys
//! it cares about. Precedence is flags > file > defaults. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::model::{InvalidSpec, SchedulingConfig};
use crate::time::parse_duration;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid scheduling defaults: {0}")]
    Scheduling(#[from] InvalidSpec),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Raw parsed document: key to (value, source line). Line 0 marks a flag
/// override.
#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.trim().to_string(),
                });
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.trim().to_string(),
                });
            }
            entries.insert(key.to_string(), (unquote(value.trim()).to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    /// Applies a command-line override; flags win over the file.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), (value.into(), 0));
    }

    /// Applies `key=value` strings as produced by `--set`.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: 0,
                text: o.to_string(),
            })?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn into_config(self) -> Result<Config, ConfigError> {
        let mut r = Reader {
            entries: self.entries,
        };
        let config = Config::read(&mut r)?;
        if let Some((key, (_, line))) = r.entries.into_iter().next() {
            return Err(ConfigError::UnknownKey { key, line });
        }
        config.validate()?;
        Ok(config)
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

struct Reader {
    entries: BTreeMap<String, (String, usize)>,
}

impl Reader {
    fn take<T>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, ConfigError> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((value, _)) => parse(&value).ok_or(ConfigError::Type {
                key: key.to_string(),
                value,
                expected,
            }),
        }
    }

    fn duration(&mut self, key: &str, default: Duration) -> Result<Duration, ConfigError> {
        self.take(key, default, "duration", parse_duration)
    }

    fn num<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        self.take(key, default, "number", |s| s.parse().ok())
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.take(key, default, "bool", |s| match s {
            "true" | "yes" | "on" | "1" => Some(true),
            "false" | "no" | "off" | "0" => Some(false),
            _ => None,
        })
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String, ConfigError> {
        self.take(key, default.to_string(), "string", |s| Some(s.to_string()))
    }

    fn list(&mut self, key: &str) -> Result<Vec<String>, ConfigError> {
        self.take(key, Vec::new(), "list", |s| {
            Some(
                s.split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(String::from)
                    .collect(),
            )
        })
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>, ConfigError> {
        self.take(key, None, "path", |s| {
            Some(if s.is_empty() {
                None
            } else {
                Some(PathBuf::from(s))
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckMode {
    /// Ack once the leader's local append is durable.
    LeaderLocal,
    /// Ack once a majority of replicas hold the entry durably.
    Majority,
}

impl FromStr for AckMode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "leader-local" | "leader_local" | "local" => Ok(Self::LeaderLocal),
            "majority" => Ok(Self::Majority),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeKind {
    Process,
    Stub,
}

impl FromStr for RuntimeKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "process" => Ok(Self::Process),
            "stub" => Ok(Self::Stub),
            _ => Err(()),
        }
    }
}

/// Per-instance identity, usually supplied with `--set` flags.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub listen: SocketAddr,
    /// Address other components use to reach this one.
    pub advertise: Ipv4Addr,
    pub name: String,
    /// Position of this control plane in `replicas`.
    pub replica_id: usize,
    /// Seeds randomized timers (election timeouts).
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub election_timeout_min: Duration,
    pub election_timeout_max: Duration,
    pub election_heartbeat_interval: Duration,
    pub ack_mode: AckMode,
    pub data_dir: PathBuf,
    /// Log size in bytes beyond which compaction runs.
    pub compaction_threshold: u64,
    /// Ablation: persist sandbox state on the cold-start path.
    pub persist_sandboxes: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            election_timeout_min: Duration::from_millis(150),
            election_timeout_max: Duration::from_millis(300),
            election_heartbeat_interval: Duration::from_millis(50),
            ack_mode: AckMode::LeaderLocal,
            data_dir: PathBuf::from("data"),
            compaction_threshold: 64 << 20,
            persist_sandboxes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    /// Control plane RPC addresses, indexed by replica id.
    pub replicas: Vec<String>,
    /// Front-end routers to notify about data plane membership.
    pub frontends: Vec<String>,
    pub reconcile_period: Duration,
    /// Cadence of worker and data plane heartbeats.
    pub heartbeat_interval: Duration,
    /// Missed heartbeat intervals before a component is declared dead.
    pub failure_threshold: u32,
    /// Width of one metrics ring bucket.
    pub metrics_bucket: Duration,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            replicas: Vec::new(),
            frontends: Vec::new(),
            reconcile_period: Duration::from_secs(2),
            heartbeat_interval: Duration::from_millis(500),
            failure_threshold: 3,
            metrics_bucket: Duration::from_secs(1),
        }
    }
}

impl ControlConfig {
    pub fn failure_timeout(&self) -> Duration {
        self.heartbeat_interval * self.failure_threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPlaneConfig {
    pub metrics_period: Duration,
    pub queue_bound: usize,
    pub async_attempts: u32,
    pub async_backoff: Duration,
    pub body_limit: usize,
}

impl Default for DataPlaneConfig {
    fn default() -> Self {
        Self {
            metrics_period: Duration::from_secs(1),
            queue_bound: 10_000,
            async_attempts: 3,
            async_backoff: Duration::from_millis(100),
            body_limit: 4 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub runtime: RuntimeKind,
    pub stub_delay: Duration,
    pub port_range: (u16, u16),
    pub parallel_creates: usize,
    pub readiness_timeout: Duration,
    pub probe_interval: Duration,
    pub cpu_capacity: u32,
    pub mem_capacity: u32,
    /// Executable used by the process runtime; defaults to the running binary.
    pub sandbox_bin: Option<PathBuf>,
    /// When set, sandboxes append one line per execution start.
    pub exec_log: Option<PathBuf>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            runtime: RuntimeKind::Process,
            stub_delay: Duration::from_millis(40),
            port_range: (30000, 32767),
            parallel_creates: 64,
            readiness_timeout: Duration::from_secs(10),
            probe_interval: Duration::from_millis(10),
            cpu_capacity: 64_000,
            mem_capacity: 262_144,
            sandbox_bin: None,
            exec_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub dataplanes: Vec<String>,
    pub probe_interval: Duration,
    pub probe_failures: u32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            dataplanes: Vec::new(),
            probe_interval: Duration::from_millis(500),
            probe_failures: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub node: NodeConfig,
    pub sched: SchedulingConfig,
    pub store: StoreConfig,
    pub control: ControlConfig,
    pub data_plane: DataPlaneConfig,
    pub worker: WorkerConfig,
    pub frontend: FrontendConfig,
}

impl Default for Config {
    fn default() -> Self {
        ConfigDoc::default()
            .into_config()
            .expect("defaults are valid")
    }
}

fn parse_port_range(s: &str) -> Option<(u16, u16)> {
    let (lo, hi) = s.split_once('-')?;
    let lo: u16 = lo.trim().parse().ok()?;
    let hi: u16 = hi.trim().parse().ok()?;
    (lo <= hi).then_some((lo, hi))
}

impl Config {
    fn read(r: &mut Reader) -> Result<Self, ConfigError> {
        let d = SchedulingConfig::default();
        let sched = SchedulingConfig {
            concurrency_target: r.num("concurrency_target", d.concurrency_target)?,
            stable_window: r.duration("stable_window", d.stable_window)?,
            panic_window: r.duration("panic_window", d.panic_window)?,
            panic_threshold: r.num("panic_threshold", d.panic_threshold)?,
            scale_to_zero_grace: r.duration("scale_to_zero_grace", d.scale_to_zero_grace)?,
            min_scale: r.num("min_scale", d.min_scale)?,
            max_scale: r.take(
                "max_scale",
                d.max_scale,
                "integer or `unbounded`",
                |s| match s {
                    "unbounded" => Some(None),
                    n => n.parse().ok().map(Some),
                },
            )?,
            cpu_request: r.num("cpu_request", d.cpu_request)?,
            mem_request: r.num("mem_request", d.mem_request)?,
            queue_timeout: r.duration("queue_timeout", d.queue_timeout)?,
        };

        let node = NodeConfig {
            listen: r.take(
                "listen",
                "127.0.0.1:0".parse().unwrap(),
                "socket address",
                |s| s.parse().ok(),
            )?,
            advertise: r.take("advertise", Ipv4Addr::LOCALHOST, "IPv4 address", |s| {
                s.parse().ok()
            })?,
            name: r.string("name", "")?,
            replica_id: r.num("replica_id", 0)?,
            seed: r.num("seed", 0)?,
        };

        let s = StoreConfig::default();
        let store = StoreConfig {
            election_timeout_min: r.duration("election_timeout_min", s.election_timeout_min)?,
            election_timeout_max: r.duration("election_timeout_max", s.election_timeout_max)?,
            election_heartbeat_interval: r
                .duration("election_heartbeat_interval", s.election_heartbeat_interval)?,
            ack_mode: r.take(
                "ack_mode",
                s.ack_mode,
                "`leader-local` or `majority`",
                |v| v.parse().ok(),
            )?,
            data_dir: r.path("data_dir")?.unwrap_or(s.data_dir),
            compaction_threshold: r.num("compaction_threshold", s.compaction_threshold)?,
            persist_sandboxes: r.boolean("persist_sandboxes", s.persist_sandboxes)?,
        };

        let c = ControlConfig::default();
        let control = ControlConfig {
            replicas: r.list("replicas")?,
            frontends: r.list("frontends")?,
            reconcile_period: r.duration("reconcile_period", c.reconcile_period)?,
            heartbeat_interval: r.duration("heartbeat_interval", c.heartbeat_interval)?,
            failure_threshold: r.num("failure_threshold", c.failure_threshold)?,
            metrics_bucket: r.duration("metrics_bucket", c.metrics_bucket)?,
        };

        let p = DataPlaneConfig::default();
        let data_plane = DataPlaneConfig {
            metrics_period: r.duration("metrics_period", p.metrics_period)?,
            queue_bound: r.num("queue_bound", p.queue_bound)?,
            async_attempts: r.num("async_attempts", p.async_attempts)?,
            async_backoff: r.duration("async_backoff", p.async_backoff)?,
            body_limit: r.num("body_limit", p.body_limit)?,
        };

        let w = WorkerConfig::default();
        let worker = WorkerConfig {
            runtime: r.take("runtime", w.runtime, "`process` or `stub`", |v| {
                v.parse().ok()
            })?,
            stub_delay: r.duration("stub_delay", w.stub_delay)?,
            port_range: r.take(
                "port_range",
                w.port_range,
                "port range `lo-hi`",
                parse_port_range,
            )?,
            parallel_creates: r.num("parallel_creates", w.parallel_creates)?,
            readiness_timeout: r.duration("readiness_timeout", w.readiness_timeout)?,
            probe_interval: r.duration("sandbox_probe_interval", w.probe_interval)?,
            cpu_capacity: r.num("cpu_capacity", w.cpu_capacity)?,
            mem_capacity: r.num("mem_capacity", w.mem_capacity)?,
            sandbox_bin: r.path("sandbox_bin")?,
            exec_log: r.path("exec_log")?,
        };

        let f = FrontendConfig::default();
        let frontend = FrontendConfig {
            dataplanes: r.list("dataplanes")?,
            probe_interval: r.duration("probe_interval", f.probe_interval)?,
            probe_failures: r.num("probe_failures", f.probe_failures)?,
        };

        Ok(Self {
            node,
            sched,
            store,
            control,
            data_plane,
            worker,
            frontend,
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.sched.validate()?;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.store.election_timeout_min > self.store.election_timeout_max {
            return invalid("election_timeout_min exceeds election_timeout_max");
        }
        if self.store.election_heartbeat_interval >= self.store.election_timeout_min {
            return invalid("election_heartbeat_interval must be below election_timeout_min");
        }
        if self.control.failure_threshold == 0 {
            return invalid("failure_threshold must be at least 1");
        }
        if self.control.metrics_bucket.is_zero() {
            return invalid("metrics_bucket must be positive");
        }
        if self.data_plane.async_attempts == 0 {
            return invalid("async_attempts must be at least 1");
        }
        if self.worker.parallel_creates == 0 {
            return invalid("parallel_creates must be at least 1");
        }
        if self.frontend.probe_failures == 0 {
            return invalid("probe_failures must be at least 1");
        }
        Ok(())
    }
}

/// Parses a configuration document, applying defaults for absent keys.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    ConfigDoc::parse(text)?.into_config()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.sched, SchedulingConfig::default());
        assert_eq!(c.store, StoreConfig::default());
        assert_eq!(c.control, ControlConfig::default());
        assert_eq!(c.data_plane, DataPlaneConfig::default());
        assert_eq!(c.worker, WorkerConfig::default());
        assert_eq!(c.frontend, FrontendConfig::default());
        assert_eq!(c, Config::default());
    }

    #[test]
    fn stable_window_parses_as_duration() {
        let c = parse_config("stable_window = 60s").unwrap();
        assert_eq!(c.sched.stable_window, Duration::from_secs(60));
        let c = parse_config("stable_window = 90s\npanic_window = 500ms # comment").unwrap();
        assert_eq!(c.sched.stable_window, Duration::from_secs(90));
        assert_eq!(c.sched.panic_window, Duration::from_millis(500));
    }

    #[test]
    fn zero_concurrency_target_is_rejected() {
        assert_eq!(
            parse_config("concurrency_target = 0"),
            Err(ConfigError::Scheduling(InvalidSpec::ZeroConcurrency))
        );
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(
            parse_config("# ok\nnot a pair"),
            Err(ConfigError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("stable_windw = 5s"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("min_scale = many"),
            Err(ConfigError::Type { .. })
        ));
        assert!(matches!(
            parse_config("ack_mode = quorum"),
            Err(ConfigError::Type { .. })
        ));
    }

    #[test]
    fn flags_override_file() {
        let mut doc =
            ConfigDoc::parse("runtime = process\nport_range = 20000-20010\nmax_scale = 4").unwrap();
        doc.apply_overrides(["runtime=stub", "replicas = a:1, b:2"])
            .unwrap();
        let c = doc.into_config().unwrap();
        assert_eq!(c.worker.runtime, RuntimeKind::Stub);
        assert_eq!(c.worker.port_range, (20000, 20010));
        assert_eq!(c.sched.max_scale, Some(4));
        assert_eq!(
            c.control.replicas,
            vec!["a:1".to_string(), "b:2".to_string()]
        );
        assert_eq!(
            parse_config("max_scale = unbounded")
                .unwrap()
                .sched
                .max_scale,
            None
        );
    }
}
