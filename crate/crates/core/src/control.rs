//! Control-plane loop: pending rule operations, batched southbound calls,
//! idle-notification handling and liveness synchronisation.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::net::Ipv4Addr;
use std::time::Duration;

use crate::config::{ControlConfig, NetworkConfig};
use crate::fsd::RuleSyncEvent;
use crate::switch::{IdleNotification, InstallReport, MatRule, RuleKey, SwitchSim};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleOp {
    Install(MatRule),
    Delete(RuleKey),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("southbound channel failure: {0}")]
pub struct ChannelError(pub String);

/// The switch's rule-management interface.
pub trait SouthboundChannel {
    fn install(&mut self, batch: Vec<MatRule>, now: SimTime) -> Result<InstallReport, ChannelError>;
    /// Returns the number of rules removed and the call latency.
    fn delete(&mut self, keys: &[RuleKey], now: SimTime) -> Result<(usize, Duration), ChannelError>;
}

impl SouthboundChannel for SwitchSim {
    fn install(&mut self, batch: Vec<MatRule>, now: SimTime) -> Result<InstallReport, ChannelError> {
        Ok(self.install_rules(batch, now))
    }

    fn delete(&mut self, keys: &[RuleKey], now: SimTime) -> Result<(usize, Duration), ChannelError> {
        let latency = self.latency_model().call_latency(keys.len());
        Ok((self.delete_rules(keys, now), latency))
    }
}

/// Bounded FIFO of pending operations.
#[derive(Debug)]
pub struct PendingRuleQueue {
    ops: VecDeque<RuleOp>,
    capacity: usize,
    high_watermark: usize,
    rejected: u64,
}

impl PendingRuleQueue {
    pub fn new(capacity: usize) -> Self {
        Self { ops: VecDeque::new(), capacity, high_watermark: 0, rejected: 0 }
    }

    pub fn push(&mut self, op: RuleOp) -> Result<(), RuleOp> {
        if self.ops.len() >= self.capacity {
            self.rejected += 1;
            return Err(op);
        }
        self.ops.push_back(op);
        self.high_watermark = self.high_watermark.max(self.ops.len());
        Ok(())
    }

    pub fn pop_up_to(&mut self, n: usize) -> Vec<RuleOp> {
        let n = n.min(self.ops.len());
        self.ops.drain(..n).collect()
    }

    /// Puts operations back at the head, keeping their order.
    fn requeue_front(&mut self, ops: Vec<RuleOp>) {
        for op in ops.into_iter().rev() {
            self.ops.push_front(op);
        }
        self.high_watermark = self.high_watermark.max(self.ops.len());
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn high_watermark(&self) -> usize {
        self.high_watermark
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchKind {
    Install,
    Delete,
}

/// One southbound call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallReport {
    pub kind: BatchKind,
    pub size: usize,
    /// Rules installed or removed by the switch.
    pub applied: usize,
    pub rejected: usize,
    pub latency: Duration,
}

impl CallReport {
    pub fn per_rule_latency(&self) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            self.latency.as_secs_f64() / self.size as f64
        }
    }
}

/// Outcome of one `drain_and_apply` round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchReport {
    pub at: SimTime,
    pub ops_applied: usize,
    pub calls: Vec<CallReport>,
    /// When the last call of the round returns; the controller is busy until then.
    pub completes_at: SimTime,
    /// Liveness updates to apply once the calls complete.
    pub syncs: Vec<(Ipv4Addr, RuleSyncEvent)>,
    pub queue_len_after: usize,
}

impl BatchReport {
    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    /// Total latency divided by the number of operations.
    pub fn per_rule_latency(&self) -> f64 {
        if self.ops_applied == 0 {
            return 0.0;
        }
        self.calls.iter().map(|c| c.latency.as_secs_f64()).sum::<f64>() / self.ops_applied as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlStats {
    pub rounds: u64,
    pub install_calls: u64,
    pub delete_calls: u64,
    pub ops_applied: u64,
    pub channel_failures: u64,
    pub ops_abandoned: u64,
    pub notifications: u64,
    pub notifications_ignored: u64,
    pub queue_rejected: u64,
}

pub struct Controller {
    net: std::sync::Arc<NetworkConfig>,
    queue: PendingRuleQueue,
    k_batch: usize,
    retry_attempts: u32,
    retry_backoff: Duration,
    busy_until: SimTime,
    failed_attempts: u32,
    static_entries: HashSet<(Ipv4Addr, u16)>,
    /// Installed rules per internal host, for liveness syncs.
    live_rules: BTreeMap<Ipv4Addr, BTreeSet<RuleKey>>,
    stats: ControlStats,
}

impl Controller {
    pub fn new(net: std::sync::Arc<NetworkConfig>, cfg: &ControlConfig) -> Self {
        Self {
            k_batch: net.timers.k_batch,
            queue: PendingRuleQueue::new(cfg.queue_capacity),
            retry_attempts: cfg.retry_attempts,
            retry_backoff: cfg.retry_backoff,
            busy_until: SimTime::ZERO,
            failed_attempts: 0,
            static_entries: HashSet::new(),
            live_rules: BTreeMap::new(),
            stats: ControlStats::default(),
            net,
        }
    }

    pub fn with_k_batch(mut self, k: usize) -> Self {
        self.k_batch = k.max(1);
        self
    }

    /// Static whitelist entries; idle notifications for them are ignored.
    pub fn set_static_entries(&mut self, entries: impl IntoIterator<Item = (Ipv4Addr, u16)>) {
        self.static_entries = entries.into_iter().collect();
    }

    pub fn enqueue(&mut self, op: RuleOp) -> bool {
        let ok = self.queue.push(op).is_ok();
        if !ok {
            self.stats.queue_rejected += 1;
        }
        ok
    }

    pub fn enqueue_installs(&mut self, rules: impl IntoIterator<Item = MatRule>) {
        for r in rules {
            self.enqueue(RuleOp::Install(r));
        }
    }

    pub fn on_idle_notifications(&mut self, batch: &[IdleNotification], _now: SimTime) {
        for n in batch {
            self.stats.notifications += 1;
            if self.static_entries.contains(&(n.rule_key.ip, n.rule_key.port)) {
                self.stats.notifications_ignored += 1;
                continue;
            }
            self.enqueue(RuleOp::Delete(n.rule_key));
        }
    }

    /// True when a call may be issued at `now`.
    pub fn is_idle(&self, now: SimTime) -> bool {
        now >= self.busy_until
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Pops up to `k_batch` operations and issues at most one install call
    /// and one delete call. A no-op while a previous round is in flight or
    /// the queue is empty. On a channel failure the operations go back to the
    /// head of the queue and the next attempt waits an exponentially growing
    /// backoff; after `retry_attempts` failures they are abandoned.
    pub fn drain_and_apply(&mut self, now: SimTime, channel: &mut dyn SouthboundChannel) -> BatchReport {
        let mut report = BatchReport { at: now, completes_at: now, ..Default::default() };
        if now < self.busy_until || self.queue.is_empty() {
            report.queue_len_after = self.queue.len();
            return report;
        }
        self.stats.rounds += 1;
        let ops = self.queue.pop_up_to(self.k_batch);
        let mut installs = Vec::new();
        let mut deletes = Vec::new();
        for op in &ops {
            match op {
                RuleOp::Install(r) => installs.push(r.clone()),
                RuleOp::Delete(k) => deletes.push(*k),
            }
        }
        let mut elapsed = Duration::ZERO;
        let mut failed = None;
        if !installs.is_empty() {
            let n = installs.len();
            let keys: Vec<RuleKey> = installs.iter().map(|r| r.key).collect();
            match channel.install(installs, now) {
                Ok(rep) => {
                    self.stats.install_calls += 1;
                    elapsed += rep.latency;
                    report.calls.push(CallReport {
                        kind: BatchKind::Install,
                        size: n,
                        applied: rep.installed,
                        rejected: rep.rejected,
                        latency: rep.latency,
                    });
                    let applied: Vec<RuleKey> = keys.into_iter().filter(|k| !rep.rejected_keys.contains(k)).collect();
                    self.track_installed(&mut report, &applied);
                }
                Err(e) => failed = Some(e),
            }
        }
        if failed.is_none() && !deletes.is_empty() {
            match channel.delete(&deletes, now + elapsed) {
                Ok((removed, latency)) => {
                    self.stats.delete_calls += 1;
                    elapsed += latency;
                    report.calls.push(CallReport {
                        kind: BatchKind::Delete,
                        size: deletes.len(),
                        applied: removed,
                        rejected: 0,
                        latency,
                    });
                    self.track_deleted(&mut report, &deletes);
                }
                Err(e) => failed = Some(e),
            }
        }
        if failed.is_some() {
            self.stats.channel_failures += 1;
            self.failed_attempts += 1;
            // Installs that already went through are not repeated.
            let pending: Vec<RuleOp> = if report.calls.is_empty() {
                ops
            } else {
                ops.into_iter().filter(|o| matches!(o, RuleOp::Delete(_))).collect()
            };
            if self.failed_attempts >= self.retry_attempts.max(1) {
                self.stats.ops_abandoned += pending.len() as u64;
                self.failed_attempts = 0;
            } else {
                self.queue.requeue_front(pending);
                let backoff = self.retry_backoff * (1u32 << (self.failed_attempts - 1).min(16));
                elapsed += backoff;
            }
        } else {
            self.failed_attempts = 0;
        }
        report.ops_applied = report.calls.iter().map(|c| c.size).sum();
        self.stats.ops_applied += report.ops_applied as u64;
        report.completes_at = now + elapsed;
        self.busy_until = report.completes_at;
        report.queue_len_after = self.queue.len();
        report
    }

    /// A host gets an `Installed` sync when its first rule goes in.
    fn track_installed(&mut self, report: &mut BatchReport, keys: &[RuleKey]) {
        for k in keys.iter().filter(|k| self.net.is_internal(k.ip)) {
            let set = self.live_rules.entry(k.ip).or_default();
            if set.is_empty() {
                report.syncs.push((k.ip, RuleSyncEvent::Installed));
            }
            set.insert(*k);
        }
    }

    /// A host gets a `Deleted` sync when its last rule goes away.
    fn track_deleted(&mut self, report: &mut BatchReport, keys: &[RuleKey]) {
        for k in keys {
            if let Some(set) = self.live_rules.get_mut(&k.ip) {
                if set.remove(k) && set.is_empty() {
                    self.live_rules.remove(&k.ip);
                    report.syncs.push((k.ip, RuleSyncEvent::Deleted));
                }
            }
        }
    }

    /// Internal hosts holding at least one installed rule.
    pub fn hosts_with_rules(&self) -> impl Iterator<Item = Ipv4Addr> + '_ {
        self.live_rules.keys().copied()
    }

    pub fn queue(&self) -> &PendingRuleQueue {
        &self.queue
    }

    pub fn k_batch(&self) -> usize {
        self.k_batch
    }

    pub fn stats(&self) -> &ControlStats {
        &self.stats
    }
}
