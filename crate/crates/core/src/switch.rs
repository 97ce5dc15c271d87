//! Functional model of the programmable switch data plane.
//!
//! Three stages, in order: the static per-service whitelist, the dynamic
//! exact-match table of benign-flow rules with idle TTLs, and the mirror path
//! that anonymizes a copy of every unmatched packet and queues it for the
//! flow-state detection engine.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::anonymizer::{anonymize_for_mirror, MirroredPacket};
use crate::config::{LatencyModel, NetworkConfig, SwitchConfig, WhitelistScope};
use crate::packet::PacketRecord;
use crate::queue::BoundedQueue;
use crate::time::SimTime;

/// Which packet field a dynamic rule matches against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleSide {
    /// Matches packets whose (dst ip, dst port, proto) equals the key.
    MatchAsDst,
    /// Matches packets whose (src ip, src port, proto) equals the key.
    MatchAsSrc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleKey {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub proto: u8,
    pub side: RuleSide,
}

/// One exact-match entry of the dynamic table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatRule {
    pub key: RuleKey,
    pub ttl_initial: Duration,
    pub ttl_remaining: Duration,
    pub installed_at: SimTime,
    /// Install latency elapsed; the rule matches from here on.
    pub effective_at: SimTime,
    hit: bool,
}

impl MatRule {
    pub fn new(key: RuleKey, ttl: Duration) -> Self {
        Self {
            key,
            ttl_initial: ttl,
            ttl_remaining: ttl,
            installed_at: SimTime::ZERO,
            effective_at: SimTime::ZERO,
            hit: false,
        }
    }

    /// The two rules that filter every packet to or from `ip:port/proto`.
    pub fn pair(ip: Ipv4Addr, port: u16, proto: u8, ttl: Duration) -> [MatRule; 2] {
        [RuleSide::MatchAsDst, RuleSide::MatchAsSrc].map(|side| MatRule::new(RuleKey { ip, port, proto, side }, ttl))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdleNotification {
    pub rule_key: RuleKey,
    pub fired_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchAction {
    DroppedWhitelist,
    DroppedFlowRule,
    /// The anonymized copy was queued on the mirror path.
    Mirrored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SwitchError {
    #[error("mirror queue full, packet dropped")]
    MirrorQueueFull,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstallReport {
    pub installed: usize,
    pub rejected: usize,
    pub latency: Duration,
    /// Keys refused for lack of table space, in batch order.
    pub rejected_keys: Vec<RuleKey>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchCounters {
    pub packets: u64,
    pub whitelist_hits: u64,
    pub whitelist_misses: u64,
    pub dynamic_hits: u64,
    pub dynamic_misses: u64,
    pub mirrored: u64,
    pub backpressure_drops: u64,
    pub malformed_truncations: u64,
    pub install_calls: u64,
    pub rules_installed: u64,
    pub rules_rejected: u64,
    pub delete_calls: u64,
    pub rules_deleted: u64,
    pub idle_notifications: u64,
    pub notify_drops: u64,
}

impl SwitchCounters {
    /// `key=value` lines, one counter per line.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("switch.packets", self.packets),
            ("switch.whitelist_hits", self.whitelist_hits),
            ("switch.whitelist_misses", self.whitelist_misses),
            ("switch.dynamic_hits", self.dynamic_hits),
            ("switch.dynamic_misses", self.dynamic_misses),
            ("switch.mirrored", self.mirrored),
            ("switch.backpressure_drops", self.backpressure_drops),
            ("switch.malformed_truncations", self.malformed_truncations),
            ("switch.install_calls", self.install_calls),
            ("switch.rules_installed", self.rules_installed),
            ("switch.rules_rejected", self.rules_rejected),
            ("switch.delete_calls", self.delete_calls),
            ("switch.rules_deleted", self.rules_deleted),
            ("switch.idle_notifications", self.idle_notifications),
            ("switch.notify_drops", self.notify_drops),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WhitelistError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected \"ip,port\", got {text:?}")]
    BadLine { line: usize, text: String },
}

/// Parses whitelist text: one `ip,port` per line, `#` comments allowed.
pub fn parse_whitelist(text: &str) -> Result<Vec<(Ipv4Addr, u16)>, WhitelistError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let bad = || WhitelistError::BadLine { line: i + 1, text: line.to_string() };
        let (ip, port) = l.split_once(',').ok_or_else(bad)?;
        let ip: Ipv4Addr = ip.trim().parse().map_err(|_| bad())?;
        let port: u16 = port.trim().parse().map_err(|_| bad())?;
        out.push((ip, port));
    }
    Ok(out)
}

pub fn load_whitelist(path: &Path) -> Result<Vec<(Ipv4Addr, u16)>, WhitelistError> {
    parse_whitelist(&std::fs::read_to_string(path)?)
}

pub struct SwitchSim {
    net: Arc<NetworkConfig>,
    whitelist: HashSet<(Ipv4Addr, u16)>,
    table: BTreeMap<RuleKey, MatRule>,
    capacity: usize,
    latency: LatencyModel,
    mirror_out: BoundedQueue<MirroredPacket>,
    notify_out: BoundedQueue<IdleNotification>,
    counters: SwitchCounters,
    last_tick: Option<SimTime>,
}

impl SwitchSim {
    pub fn new(net: Arc<NetworkConfig>, cfg: &SwitchConfig, latency: LatencyModel) -> Self {
        Self {
            net,
            whitelist: HashSet::new(),
            table: BTreeMap::new(),
            capacity: cfg.capacity,
            latency,
            mirror_out: BoundedQueue::new(cfg.mirror_queue.max(1)),
            notify_out: BoundedQueue::new(cfg.notify_queue.max(1)),
            counters: SwitchCounters::default(),
            last_tick: None,
        }
    }

    /// Loads static entries. Under [`WhitelistScope::External`] entries for
    /// internal addresses are ignored; returns how many were kept.
    pub fn set_whitelist(
        &mut self,
        entries: impl IntoIterator<Item = (Ipv4Addr, u16)>,
        scope: WhitelistScope,
    ) -> usize {
        self.whitelist =
            entries.into_iter().filter(|(ip, _)| scope == WhitelistScope::Any || !self.net.is_internal(*ip)).collect();
        self.whitelist.len()
    }

    pub fn is_whitelisted(&self, ip: Ipv4Addr, port: u16) -> bool {
        self.whitelist.contains(&(ip, port))
    }

    fn whitelist_match(&self, pkt: &PacketRecord) -> bool {
        !self.whitelist.is_empty()
            && (self.whitelist.contains(&(pkt.dst_ip, pkt.dst_port))
                || self.whitelist.contains(&(pkt.src_ip, pkt.src_port)))
    }

    fn dynamic_match(&mut self, pkt: &PacketRecord, now: SimTime) -> bool {
        if pkt.is_icmp_error() {
            return false;
        }
        let proto = pkt.proto.number();
        let keys = [
            RuleKey { ip: pkt.dst_ip, port: pkt.dst_port, proto, side: RuleSide::MatchAsDst },
            RuleKey { ip: pkt.src_ip, port: pkt.src_port, proto, side: RuleSide::MatchAsSrc },
        ];
        let mut matched = false;
        for k in keys {
            if let Some(rule) = self.table.get_mut(&k) {
                if rule.effective_at <= now {
                    rule.ttl_remaining = rule.ttl_initial;
                    rule.hit = true;
                    matched = true;
                }
            }
        }
        matched
    }

    pub fn process_packet(&mut self, pkt: &PacketRecord, now: SimTime) -> Result<SwitchAction, SwitchError> {
        self.counters.packets += 1;
        if self.whitelist_match(pkt) {
            self.counters.whitelist_hits += 1;
            return Ok(SwitchAction::DroppedWhitelist);
        }
        self.counters.whitelist_misses += 1;
        if self.dynamic_match(pkt, now) {
            self.counters.dynamic_hits += 1;
            return Ok(SwitchAction::DroppedFlowRule);
        }
        self.counters.dynamic_misses += 1;
        let (copy, malformed) = anonymize_for_mirror(pkt, &self.net);
        if malformed {
            self.counters.malformed_truncations += 1;
        }
        match self.mirror_out.push(copy) {
            Ok(()) => {
                self.counters.mirrored += 1;
                Ok(SwitchAction::Mirrored)
            }
            Err(_) => {
                self.counters.backpressure_drops += 1;
                Err(SwitchError::MirrorQueueFull)
            }
        }
    }

    /// Inserts a batch. Existing keys are refreshed in place; new keys are
    /// accepted while space remains and the overflow suffix is rejected.
    pub fn install_rules(&mut self, batch: Vec<MatRule>, now: SimTime) -> InstallReport {
        self.counters.install_calls += 1;
        let latency = self.latency.call_latency(batch.len());
        let effective_at = now + latency;
        let mut report = InstallReport { latency, ..Default::default() };
        for mut rule in batch {
            if !self.table.contains_key(&rule.key) && self.table.len() >= self.capacity {
                report.rejected += 1;
                report.rejected_keys.push(rule.key);
                continue;
            }
            rule.installed_at = now;
            rule.effective_at = effective_at;
            rule.ttl_remaining = rule.ttl_initial;
            rule.hit = false;
            self.table.insert(rule.key, rule);
            report.installed += 1;
        }
        self.counters.rules_installed += report.installed as u64;
        self.counters.rules_rejected += report.rejected as u64;
        report
    }

    /// Removes present keys; absent keys are ignored. Returns the number removed.
    pub fn delete_rules(&mut self, keys: &[RuleKey], _now: SimTime) -> usize {
        self.counters.delete_calls += 1;
        let removed = keys.iter().filter(|k| self.table.remove(k).is_some()).count();
        self.counters.rules_deleted += removed as u64;
        removed
    }

    /// Idle-TTL pass. Effective rules not matched since the previous pass lose
    /// one query interval of TTL; rules reaching zero are removed and
    /// notified. Calls closer than `query_interval` to the previous pass are
    /// ignored. Notifications are returned and also queued on the
    /// notification channel.
    pub fn tick(&mut self, now: SimTime, query_interval: Duration) -> Vec<IdleNotification> {
        if let Some(last) = self.last_tick {
            if now < last + query_interval {
                return Vec::new();
            }
        }
        self.last_tick = Some(now);
        let mut expired = Vec::new();
        for rule in self.table.values_mut() {
            if rule.effective_at > now {
                continue;
            }
            if std::mem::take(&mut rule.hit) {
                continue;
            }
            rule.ttl_remaining = rule.ttl_remaining.saturating_sub(query_interval);
            if rule.ttl_remaining.is_zero() {
                expired.push(rule.key);
            }
        }
        let mut out = Vec::with_capacity(expired.len());
        for key in expired {
            self.table.remove(&key);
            let n = IdleNotification { rule_key: key, fired_at: now };
            self.counters.idle_notifications += 1;
            if self.notify_out.push(n).is_err() {
                self.counters.notify_drops += 1;
            }
            out.push(n);
        }
        out
    }

    pub fn rule(&self, key: &RuleKey) -> Option<&MatRule> {
        self.table.get(key)
    }

    pub fn rule_count(&self) -> usize {
        self.table.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mirror_out(&self) -> &BoundedQueue<MirroredPacket> {
        &self.mirror_out
    }

    pub fn notify_out(&self) -> &BoundedQueue<IdleNotification> {
        &self.notify_out
    }

    pub fn counters(&self) -> &SwitchCounters {
        &self.counters
    }

    pub fn latency_model(&self) -> &LatencyModel {
        &self.latency
    }
}
