//! Deployment configuration.
//!
//! The configuration file is TOML. Sections:
//!
//! ```toml
//! [network]
//! internal_prefixes  = ["10.0.0.0/24"]      # CIDR strings
//! telescope_prefixes = ["10.0.0.0/28"]      # must lie inside internal_prefixes
//! impersonate        = ["10.0.0.200:80/tcp"]
//! anonymization_key  = "0x5eed1234"         # 32-bit hex; ERRMON_ANON_KEY overrides
//!
//! [timers]                                  # seconds unless noted
//! dt = 1.0
//! dt_impersonated = 0.070
//! t_inst = 1.0
//! t_alive = 300.0
//! p_d = 1e-5
//! d_max = 10                                # descriptors per check
//! alpha_ht = 1e-3                           # fraction of buckets per cleaning pass
//! k_batch = 200                             # rule operations per southbound call
//! query_interval = 1.0
//! rule_ttl = 30.0
//!
//! [switch]     capacity, mirror_queue, notify_queue, whitelist_file, whitelist_scope
//! [fsd]        buckets, ring_capacity, buffer_capacity, store_duplicates, hash_seed, clean_interval
//! [control]    queue_capacity, latency_a, latency_b, latency_c, retry_attempts, retry_backoff
//! [collector]  responder, responder_capacity, isn_seed, pcap
//! [replay]     metrics_interval, speed_factor
//! [workload]   see `ingest::workload::WorkloadSpec`
//! ```
//!
//! Every section and key is optional; omitted values take the defaults shown.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;

use crate::flow::Endpoint;
use crate::ingest::workload::WorkloadSpec;
use crate::net::{Ipv4Prefix, PrefixSet};
use crate::packet::Proto;

/// Environment variable that overrides the anonymization key.
pub const ANON_KEY_ENV: &str = "ERRMON_ANON_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{}{key}: {msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, key: String, msg: String },
}

impl ConfigError {
    fn invalid(key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Invalid { line: None, key: key.to_string(), msg: msg.into() }
    }

    /// Attach the line of `key` inside `source`, if it can be found.
    fn locate(self, source: &str) -> Self {
        match self {
            ConfigError::Invalid { line: None, key, msg } => {
                let line = find_key_line(source, &key);
                ConfigError::Invalid { line, key, msg }
            }
            other => other,
        }
    }
}

/// Finds the 1-based line that assigns `dotted` (`section.key`).
fn find_key_line(source: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.rsplit_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// The 32-bit obfuscation key. Its `Debug`/`Display` output is redacted.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct AnonKey(pub u32);

impl fmt::Debug for AnonKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AnonKey(<redacted>)")
    }
}

impl FromStr for AnonKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let hex = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
        u32::from_str_radix(hex, 16)
            .map(AnonKey)
            .map_err(|_| "expected a 32-bit hex value such as 0x1a2b3c4d".to_string())
    }
}

/// An (ip, port, proto) endpoint the collector impersonates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceEndpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub proto: u8,
}

impl ServiceEndpoint {
    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(self.ip, self.port)
    }
}

impl FromStr for ServiceEndpoint {
    type Err = String;

    /// `ip:port/proto`, e.g. `10.0.0.200:80/tcp`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, proto) = s.trim().split_once('/').ok_or("expected ip:port/proto")?;
        let (ip, port) = addr.split_once(':').ok_or("expected ip:port/proto")?;
        let ip: Ipv4Addr = ip.parse().map_err(|_| format!("bad address {ip:?}"))?;
        let port: u16 = port.parse().map_err(|_| format!("bad port {port:?}"))?;
        let proto = Proto::parse_name(proto).ok_or_else(|| format!("bad protocol {proto:?}"))?;
        Ok(Self { ip, port, proto: proto.number() })
    }
}

impl fmt::Display for ServiceEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}/{}", self.ip, self.port, Proto::from(self.proto).name())
    }
}

/// Timer and sizing parameters shared by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Timers {
    /// Detection timeout.
    pub dt: Duration,
    /// Detection timeout for flows towards impersonated endpoints.
    pub dt_impersonated: Duration,
    /// Minimum age of a benign entry before the cleaning pass may drop it.
    pub t_inst: Duration,
    /// How long a liveness bit stays set without refresh.
    pub t_alive: Duration,
    /// Period of the detection-timeout check.
    pub p_d: Duration,
    /// Maximum descriptors popped per check.
    pub d_max: usize,
    /// Fraction of hash buckets visited per cleaning pass.
    pub alpha_ht: f64,
    /// Maximum rule operations per southbound call.
    pub k_batch: usize,
    pub query_interval: Duration,
    pub rule_ttl: Duration,
}

impl Default for Timers {
    fn default() -> Self {
        Self {
            dt: Duration::from_secs(1),
            dt_impersonated: Duration::from_millis(70),
            t_inst: Duration::from_secs(1),
            t_alive: Duration::from_secs(300),
            p_d: Duration::from_micros(10),
            d_max: 10,
            alpha_ht: 1e-3,
            k_batch: 200,
            query_interval: Duration::from_secs(1),
            rule_ttl: Duration::from_secs(30),
        }
    }
}

impl Timers {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("timers.dt", self.dt),
            ("timers.dt_impersonated", self.dt_impersonated),
            ("timers.t_inst", self.t_inst),
            ("timers.t_alive", self.t_alive),
            ("timers.p_d", self.p_d),
            ("timers.query_interval", self.query_interval),
            ("timers.rule_ttl", self.rule_ttl),
        ];
        for (k, v) in positive {
            if v.is_zero() {
                return Err(ConfigError::invalid(k, "must be strictly positive"));
            }
        }
        if self.d_max == 0 {
            return Err(ConfigError::invalid("timers.d_max", "must be strictly positive"));
        }
        if self.k_batch == 0 {
            return Err(ConfigError::invalid("timers.k_batch", "must be strictly positive"));
        }
        if !(self.alpha_ht > 0.0 && self.alpha_ht <= 1.0) {
            return Err(ConfigError::invalid("timers.alpha_ht", "must lie in (0, 1]"));
        }
        if self.dt_impersonated >= self.dt {
            return Err(ConfigError::invalid("timers.dt_impersonated", "must be smaller than timers.dt"));
        }
        Ok(())
    }
}

/// Address layout, impersonation set and anonymization key.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub internal: PrefixSet,
    pub telescope: PrefixSet,
    pub impersonation: BTreeSet<ServiceEndpoint>,
    pub anonymization_key: AnonKey,
    pub timers: Timers,
}

impl Default for NetworkConfig {
    /// One /24 internal network with a /28 telescope inside it.
    fn default() -> Self {
        Self {
            internal: PrefixSet::new(vec!["10.0.0.0/24".parse().unwrap()]),
            telescope: PrefixSet::new(vec!["10.0.0.0/28".parse().unwrap()]),
            impersonation: BTreeSet::new(),
            anonymization_key: AnonKey(0x5eed_1234),
            timers: Timers::default(),
        }
    }
}

impl NetworkConfig {
    pub fn is_internal(&self, ip: Ipv4Addr) -> bool {
        self.internal.contains(ip)
    }

    pub fn is_telescope(&self, ip: Ipv4Addr) -> bool {
        self.telescope.contains(ip)
    }

    pub fn is_impersonated(&self, ep: Endpoint, proto: u8) -> bool {
        self.impersonation.contains(&ServiceEndpoint { ip: ep.ip, port: ep.port, proto })
    }

    /// Detection timeout for a flow whose first packet targets `dst`.
    pub fn effective_dt(&self, dst: Endpoint, proto: u8) -> Duration {
        if self.is_impersonated(dst, proto) {
            self.timers.dt_impersonated
        } else {
            self.timers.dt
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.timers.validate()?;
        if self.internal.is_empty() {
            return Err(ConfigError::invalid("network.internal_prefixes", "at least one prefix required"));
        }
        if !self.telescope.is_subset_of(&self.internal) {
            return Err(ConfigError::invalid(
                "network.telescope_prefixes",
                "telescope prefixes must lie inside the internal prefixes",
            ));
        }
        if let Some(ep) = self.impersonation.iter().find(|e| !self.is_internal(e.ip)) {
            return Err(ConfigError::invalid(
                "network.impersonate",
                format!("impersonated endpoint {ep} is not internal"),
            ));
        }
        Ok(())
    }
}

/// Which destinations the static whitelist may match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhitelistScope {
    /// Only entries for external services take effect.
    #[default]
    External,
    /// Internal services may be whitelisted too.
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchConfig {
    pub capacity: usize,
    pub mirror_queue: usize,
    pub notify_queue: usize,
    pub whitelist_file: Option<PathBuf>,
    pub whitelist_scope: WhitelistScope,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            mirror_queue: 65_536,
            notify_queue: 65_536,
            whitelist_file: None,
            whitelist_scope: WhitelistScope::External,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsdConfig {
    pub buckets: usize,
    pub ring_capacity: usize,
    pub buffer_capacity: usize,
    pub store_duplicates: bool,
    pub hash_seed: u64,
    /// Period of the benign-entry cleaning pass.
    pub clean_interval: Duration,
}

impl Default for FsdConfig {
    fn default() -> Self {
        Self {
            buckets: 1 << 20,
            ring_capacity: 1 << 18,
            buffer_capacity: 1 << 18,
            store_duplicates: false,
            hash_seed: 0x5eed,
            clean_interval: Duration::from_millis(1),
        }
    }
}

/// Southbound call cost `a + b·n + c·n²` for a batch of `n` rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LatencyModel {
    /// 2 ms per call, 100 µs per rule, and a quadratic term placing the
    /// per-rule optimum at a batch of 1000, about 20 times cheaper per rule
    /// than single-rule calls.
    fn default() -> Self {
        Self { a: 2e-3, b: 1e-4, c: 2e-9 }
    }
}

impl LatencyModel {
    pub fn call_latency(&self, n: usize) -> Duration {
        if n == 0 {
            return Duration::ZERO;
        }
        let n = n as f64;
        Duration::from_secs_f64((self.a + self.b * n + self.c * n * n).max(0.0))
    }

    pub fn per_rule_latency(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.call_latency(n).as_secs_f64() / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub queue_capacity: usize,
    pub latency: LatencyModel,
    pub retry_attempts: u32,
    pub retry_backoff: Duration,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 1_000_000,
            latency: LatencyModel::default(),
            retry_attempts: 3,
            retry_backoff: Duration::from_millis(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectorConfig {
    pub responder: bool,
    pub responder_capacity: usize,
    pub isn_seed: u64,
    /// Also dump collected frames as a pcap file.
    pub pcap: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self { responder: true, responder_capacity: 4096, isn_seed: 1, pcap: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub metrics_interval: Duration,
    pub speed_factor: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { metrics_interval: Duration::from_secs(1), speed_factor: 1.0 }
    }
}

/// Everything the pipeline needs, as loaded from one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub switch: SwitchConfig,
    pub fsd: FsdConfig,
    pub control: ControlConfig,
    pub collector: CollectorConfig,
    pub replay: ReplayConfig,
    pub workload: Option<WorkloadSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    timers: RawTimers,
    #[serde(default)]
    switch: RawSwitch,
    #[serde(default)]
    fsd: RawFsd,
    #[serde(default)]
    control: RawControl,
    #[serde(default)]
    collector: RawCollector,
    #[serde(default)]
    replay: RawReplay,
    workload: Option<WorkloadSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    internal_prefixes: Option<Vec<String>>,
    telescope_prefixes: Option<Vec<String>>,
    #[serde(default)]
    impersonate: Vec<String>,
    anonymization_key: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimers {
    dt: Option<f64>,
    dt_impersonated: Option<f64>,
    t_inst: Option<f64>,
    t_alive: Option<f64>,
    p_d: Option<f64>,
    d_max: Option<i64>,
    alpha_ht: Option<f64>,
    k_batch: Option<i64>,
    query_interval: Option<f64>,
    rule_ttl: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    capacity: Option<usize>,
    mirror_queue: Option<usize>,
    notify_queue: Option<usize>,
    whitelist_file: Option<PathBuf>,
    whitelist_scope: Option<WhitelistScope>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFsd {
    buckets: Option<usize>,
    ring_capacity: Option<usize>,
    buffer_capacity: Option<usize>,
    store_duplicates: Option<bool>,
    hash_seed: Option<u64>,
    clean_interval: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    queue_capacity: Option<usize>,
    latency_a: Option<f64>,
    latency_b: Option<f64>,
    latency_c: Option<f64>,
    retry_attempts: Option<u32>,
    retry_backoff: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCollector {
    responder: Option<bool>,
    responder_capacity: Option<usize>,
    isn_seed: Option<u64>,
    pcap: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReplay {
    metrics_interval: Option<f64>,
    speed_factor: Option<f64>,
}

fn seconds(key: &str, v: Option<f64>, default: Duration) -> Result<Duration, ConfigError> {
    match v {
        None => Ok(default),
        Some(s) if s.is_finite() && s > 0.0 => Ok(Duration::from_secs_f64(s)),
        Some(_) => Err(ConfigError::invalid(key, "must be a strictly positive number of seconds")),
    }
}

fn count(key: &str, v: Option<i64>, default: usize) -> Result<usize, ConfigError> {
    match v {
        None => Ok(default),
        Some(n) if n > 0 => Ok(n as usize),
        Some(_) => Err(ConfigError::invalid(key, "must be strictly positive")),
    }
}

fn prefixes(key: &str, v: Option<Vec<String>>, default: PrefixSet) -> Result<PrefixSet, ConfigError> {
    match v {
        None => Ok(default),
        Some(list) => list
            .iter()
            .map(|s| s.parse::<Ipv4Prefix>().map_err(|e| ConfigError::invalid(key, e.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(PrefixSet::new),
    }
}

impl PipelineConfig {
    /// Parses configuration text. Relative paths resolve against `base_dir`.
    /// The anonymization key from [`ANON_KEY_ENV`] wins over the file, when set.
    pub fn from_toml_str(source: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let env_key = std::env::var(ANON_KEY_ENV).ok();
        Self::parse_with_key_override(source, base_dir, env_key.as_deref())
    }

    pub fn parse_with_key_override(
        source: &str,
        base_dir: Option<&Path>,
        key_override: Option<&str>,
    ) -> Result<Self, ConfigError> {
        let raw: RawFile = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start.min(source.len())].matches('\n').count() + 1).unwrap_or(0);
            ConfigError::Syntax { line, msg: e.message().to_string() }
        })?;
        Self::from_raw(raw, base_dir, key_override).map_err(|e| e.locate(source))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&source, path.parent())
    }

    fn from_raw(raw: RawFile, base_dir: Option<&Path>, key_override: Option<&str>) -> Result<Self, ConfigError> {
        let d = PipelineConfig::default();
        let t = &raw.timers;
        let dt = Timers::default();
        let timers = Timers {
            dt: seconds("timers.dt", t.dt, dt.dt)?,
            dt_impersonated: seconds("timers.dt_impersonated", t.dt_impersonated, dt.dt_impersonated)?,
            t_inst: seconds("timers.t_inst", t.t_inst, dt.t_inst)?,
            t_alive: seconds("timers.t_alive", t.t_alive, dt.t_alive)?,
            p_d: seconds("timers.p_d", t.p_d, dt.p_d)?,
            d_max: count("timers.d_max", t.d_max, dt.d_max)?,
            alpha_ht: t.alpha_ht.unwrap_or(dt.alpha_ht),
            k_batch: count("timers.k_batch", t.k_batch, dt.k_batch)?,
            query_interval: seconds("timers.query_interval", t.query_interval, dt.query_interval)?,
            rule_ttl: seconds("timers.rule_ttl", t.rule_ttl, dt.rule_ttl)?,
        };

        let n = &raw.network;
        let key_text = key_override.map(str::to_string).or_else(|| n.anonymization_key.clone());
        let anonymization_key = match key_text {
            None => d.network.anonymization_key,
            Some(s) => s.parse().map_err(|e: String| ConfigError::invalid("network.anonymization_key", e))?,
        };
        let impersonation = n
            .impersonate
            .iter()
            .map(|s| s.parse::<ServiceEndpoint>().map_err(|e| ConfigError::invalid("network.impersonate", e)))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let network = NetworkConfig {
            internal: prefixes("network.internal_prefixes", n.internal_prefixes.clone(), d.network.internal)?,
            telescope: prefixes("network.telescope_prefixes", n.telescope_prefixes.clone(), d.network.telescope)?,
            impersonation,
            anonymization_key,
            timers,
        };
        network.validate()?;

        let s = &raw.switch;
        let switch = SwitchConfig {
            capacity: s.capacity.unwrap_or(d.switch.capacity),
            mirror_queue: s.mirror_queue.unwrap_or(d.switch.mirror_queue),
            notify_queue: s.notify_queue.unwrap_or(d.switch.notify_queue),
            whitelist_file: s.whitelist_file.as_ref().map(|p| match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            }),
            whitelist_scope: s.whitelist_scope.unwrap_or_default(),
        };
        if switch.mirror_queue == 0 {
            return Err(ConfigError::invalid("switch.mirror_queue", "must be strictly positive"));
        }

        let f = &raw.fsd;
        let fsd = FsdConfig {
            buckets: f.buckets.unwrap_or(d.fsd.buckets),
            ring_capacity: f.ring_capacity.unwrap_or(d.fsd.ring_capacity),
            buffer_capacity: f.buffer_capacity.unwrap_or(d.fsd.buffer_capacity),
            store_duplicates: f.store_duplicates.unwrap_or(d.fsd.store_duplicates),
            hash_seed: f.hash_seed.unwrap_or(d.fsd.hash_seed),
            clean_interval: seconds("fsd.clean_interval", f.clean_interval, d.fsd.clean_interval)?,
        };
        for (k, v) in [
            ("fsd.buckets", fsd.buckets),
            ("fsd.ring_capacity", fsd.ring_capacity),
            ("fsd.buffer_capacity", fsd.buffer_capacity),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(k, "must be strictly positive"));
            }
        }

        let c = &raw.control;
        let latency = LatencyModel {
            a: c.latency_a.unwrap_or(d.control.latency.a),
            b: c.latency_b.unwrap_or(d.control.latency.b),
            c: c.latency_c.unwrap_or(d.control.latency.c),
        };
        for (k, v) in
            [("control.latency_a", latency.a), ("control.latency_b", latency.b), ("control.latency_c", latency.c)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::invalid(k, "must be a non-negative number"));
            }
        }
        let control = ControlConfig {
            queue_capacity: c.queue_capacity.unwrap_or(d.control.queue_capacity),
            latency,
            retry_attempts: c.retry_attempts.unwrap_or(d.control.retry_attempts),
            retry_backoff: seconds("control.retry_backoff", c.retry_backoff, d.control.retry_backoff)?,
        };

        let co = &raw.collector;
        let collector = CollectorConfig {
            responder: co.responder.unwrap_or(d.collector.responder),
            responder_capacity: co.responder_capacity.unwrap_or(d.collector.responder_capacity),
            isn_seed: co.isn_seed.unwrap_or(d.collector.isn_seed),
            pcap: co.pcap.unwrap_or(d.collector.pcap),
        };

        let r = &raw.replay;
        let replay = ReplayConfig {
            metrics_interval: seconds("replay.metrics_interval", r.metrics_interval, d.replay.metrics_interval)?,
            speed_factor: match r.speed_factor {
                None => 1.0,
                Some(v) if v.is_finite() && v > 0.0 => v,
                Some(_) => return Err(ConfigError::invalid("replay.speed_factor", "must be strictly positive")),
            },
        };

        if let Some(w) = &raw.workload {
            w.validate().map_err(|e| ConfigError::invalid(&format!("workload.{}", e.field), e.msg))?;
        }

        Ok(PipelineConfig { network, switch, fsd, control, collector, replay, workload: raw.workload })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::parse_with_key_override(s, None, None)
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.network.timers.dt, Duration::from_secs(1));
        assert_eq!(cfg.network.timers.k_batch, 200);
        assert!(cfg.network.is_internal("10.0.0.77".parse().unwrap()));
        assert!(!cfg.network.is_internal("8.8.8.8".parse().unwrap()));
    }

    #[test]
    fn is_internal_examples() {
        let cfg = parse(
            r#"
[network]
internal_prefixes = ["130.192.0.0/17", "10.0.0.0/8"]
telescope_prefixes = ["130.192.2.0/23"]
"#,
        )
        .unwrap();
        let n = &cfg.network;
        assert!(n.is_internal("130.192.77.1".parse().unwrap()));
        assert!(n.is_internal("130.192.3.200".parse().unwrap()));
        assert!(n.is_telescope("130.192.3.200".parse().unwrap()));
        assert!(!n.is_internal("8.8.8.8".parse().unwrap()));
    }

    #[test]
    fn alpha_zero_rejected_with_line() {
        let err = parse("[timers]\ndt = 1.0\nalpha_ht = 0.0\n").unwrap_err();
        match err {
            ConfigError::Invalid { line, key, .. } => {
                assert_eq!(key, "timers.alpha_ht");
                assert_eq!(line, Some(3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dt_impersonated_must_be_shorter() {
        let err = parse("[timers]\ndt = 0.05\n").unwrap_err();
        assert!(err.to_string().contains("dt_impersonated"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse("[timers]\n\ndt = = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse("[timers]\nbogus = 1\n").is_err());
    }

    #[test]
    fn telescope_must_be_internal() {
        let err = parse("[network]\ninternal_prefixes=[\"10.0.0.0/24\"]\ntelescope_prefixes=[\"10.0.1.0/28\"]\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { line: Some(3), .. }), "{err:?}");
    }

    #[test]
    fn impersonation_parsing_and_override() {
        let cfg = PipelineConfig::parse_with_key_override(
            "[network]\nimpersonate=[\"10.0.0.200:80/tcp\"]\nanonymization_key=\"0x01\"\n",
            None,
            Some("0xabcdef01"),
        )
        .unwrap();
        let ep = Endpoint::new("10.0.0.200".parse().unwrap(), 80);
        assert!(cfg.network.is_impersonated(ep, 6));
        assert!(!cfg.network.is_impersonated(ep, 17));
        assert_eq!(cfg.network.anonymization_key, AnonKey(0xabcdef01));
        assert_eq!(cfg.network.effective_dt(ep, 6), Duration::from_millis(70));
        assert!(!format!("{:?}", cfg.network).contains("abcdef01"));
        let err = parse("[network]\nimpersonate=[\"8.8.8.8:80/tcp\"]\n").unwrap_err();
        assert!(err.to_string().contains("not internal"));
    }

    #[test]
    fn latency_model_shape() {
        let m = LatencyModel::default();
        assert!(m.per_rule_latency(200) * 10.0 <= m.per_rule_latency(1));
        assert!(m.per_rule_latency(10_000) > m.per_rule_latency(1000));
    }
}
