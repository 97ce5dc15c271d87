//! Discrete-event replay.
//!
//! One loop owns the virtual clock and dispatches to the switch, the
//! detection engine, the controller and the collector. Events due at the
//! same instant run in a fixed order: packets, timer check, cleaning pass,
//! switch tick, control round, liveness syncs, metrics sample.
//!
//! Periodic work runs on its own grid (multiples of its period). Grid points
//! where the work has nothing to do are skipped, which leaves the outputs
//! unchanged: a timer check before the earliest deadline pops nothing, a
//! tick over an empty rule table touches nothing, and skipped cleaning passes
//! only advance the cursor, which is accounted for arithmetically.
//!
//! The run ends once the trace and injected packets are exhausted, both
//! descriptor rings are empty and the controller has nothing queued.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::time::Duration;

use crate::collector::{Collector, ErroneousRecord, RecordSink, Transcript};
use crate::config::{ConfigError, NetworkConfig, PipelineConfig};
use crate::control::{BatchKind, Controller};
use crate::fsd::{CollectReason, ExpiredPacket, FsdAction, FsdEngine, RuleSyncEvent};
use crate::packet::{PacketBuilder, PacketRecord, Proto, TcpFlags};
use crate::switch::{load_whitelist, SwitchAction, SwitchSim, WhitelistError};
use crate::time::{SimTime, VirtualClock};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("whitelist: {0}")]
    Whitelist(#[from] WhitelistError),
}

/// Remote side of impersonated connections. Receives every responder reply
/// and returns the packets it sends back, timestamped no earlier than the
/// reply.
pub trait Agent {
    fn on_reply(&mut self, reply: &PacketRecord) -> Vec<PacketRecord>;
}

/// Completes a handshake and sends one request, like a scanner fetching a
/// banner.
#[derive(Debug, Clone)]
pub struct ScannerAgent {
    pub rtt: Duration,
    pub payload: Vec<u8>,
}

impl Default for ScannerAgent {
    fn default() -> Self {
        Self { rtt: Duration::from_millis(10), payload: b"GET / HTTP/1.0\r\n\r\n".to_vec() }
    }
}

impl Agent for ScannerAgent {
    fn on_reply(&mut self, reply: &PacketRecord) -> Vec<PacketRecord> {
        if reply.proto != Proto::Tcp || reply.tcp_flags != TcpFlags::SYN | TcpFlags::ACK {
            return Vec::new();
        }
        let at = reply.ts + self.rtt;
        let seq = reply.tcp_ack;
        let ack = reply.tcp_seq.wrapping_add(1);
        let seg = |flags| {
            PacketBuilder::tcp(reply.dst_ip, reply.dst_port, reply.src_ip, reply.src_port, flags)
                .seq(seq)
                .ack(ack)
                .at(at)
        };
        vec![seg(TcpFlags::ACK).build(), seg(TcpFlags::ACK | TcpFlags::PSH).payload(self.payload.clone()).build()]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Keep a line per dispatched event.
    pub event_log: bool,
    /// Keep per-check and per-arrival timing for the processing-time model.
    pub timing_trace: bool,
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsSample {
    pub ts: SimTime,
    pub ring_len: usize,
    pub buffered: usize,
    pub table_len: usize,
    pub benign_entries: usize,
    pub pending_ops: usize,
    pub rules: usize,
    pub collected: u64,
}

pub const METRICS_HEADER: &str = "ts,ring_len,buffered,table_len,benign_entries,pending_ops,rules,collected";

impl MetricsSample {
    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.ts,
            self.ring_len,
            self.buffered,
            self.table_len,
            self.benign_entries,
            self.pending_ops,
            self.rules,
            self.collected
        )
    }
}

/// Run-level counters and derived figures.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub end_time: SimTime,
    pub packets: u64,
    pub reordered: u64,
    pub injected: u64,
    pub whitelist_drops: u64,
    pub rule_drops: u64,
    pub mirrored: u64,
    pub mirror_full: u64,
    pub mirror_high_watermark: usize,
    pub buffered: u64,
    pub benign_flows: u64,
    pub duplicate_drops: u64,
    pub duplicates_stored: u64,
    pub transient_drops: u64,
    pub ring_full: u64,
    pub buffer_full: u64,
    pub erroneous: u64,
    pub erroneous_incoming: u64,
    pub erroneous_outgoing: u64,
    pub icmp_errors: u64,
    pub sink_errors: u64,
    pub rules_installed: u64,
    pub rules_rejected: u64,
    pub rules_deleted: u64,
    pub idle_notifications: u64,
    pub install_calls: u64,
    pub delete_calls: u64,
    pub ops_abandoned: u64,
    pub pending_high_watermark: usize,
    pub mean_per_rule_latency: f64,
    pub responder_replies: u64,
    pub transcripts: u64,
    /// Share of trace packets dropped in the switch.
    pub filtering_efficiency: f64,
    pub whitelist_share: f64,
    pub buffering_p75: Duration,
    pub buffering_p95: Duration,
    pub buffering_p99: Duration,
    pub invariant_failures: Vec<String>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("end_time", self.end_time.to_string());
        kv("packets", self.packets.to_string());
        kv("reordered", self.reordered.to_string());
        kv("injected", self.injected.to_string());
        kv("whitelist_drops", self.whitelist_drops.to_string());
        kv("rule_drops", self.rule_drops.to_string());
        kv("mirrored", self.mirrored.to_string());
        kv("mirror_full", self.mirror_full.to_string());
        kv("mirror_high_watermark", self.mirror_high_watermark.to_string());
        kv("buffered", self.buffered.to_string());
        kv("benign_flows", self.benign_flows.to_string());
        kv("duplicate_drops", self.duplicate_drops.to_string());
        kv("duplicates_stored", self.duplicates_stored.to_string());
        kv("transient_drops", self.transient_drops.to_string());
        kv("ring_full", self.ring_full.to_string());
        kv("buffer_full", self.buffer_full.to_string());
        kv("erroneous", self.erroneous.to_string());
        kv("erroneous_incoming", self.erroneous_incoming.to_string());
        kv("erroneous_outgoing", self.erroneous_outgoing.to_string());
        kv("icmp_errors", self.icmp_errors.to_string());
        kv("sink_errors", self.sink_errors.to_string());
        kv("rules_installed", self.rules_installed.to_string());
        kv("rules_rejected", self.rules_rejected.to_string());
        kv("rules_deleted", self.rules_deleted.to_string());
        kv("idle_notifications", self.idle_notifications.to_string());
        kv("install_calls", self.install_calls.to_string());
        kv("delete_calls", self.delete_calls.to_string());
        kv("ops_abandoned", self.ops_abandoned.to_string());
        kv("pending_high_watermark", self.pending_high_watermark.to_string());
        kv("mean_per_rule_latency", format!("{:.9}", self.mean_per_rule_latency));
        kv("responder_replies", self.responder_replies.to_string());
        kv("transcripts", self.transcripts.to_string());
        kv("filtering_efficiency", format!("{:.6}", self.filtering_efficiency));
        kv("whitelist_share", format!("{:.6}", self.whitelist_share));
        kv("buffering_p75", format!("{:.9}", self.buffering_p75.as_secs_f64()));
        kv("buffering_p95", format!("{:.9}", self.buffering_p95.as_secs_f64()));
        kv("buffering_p99", format!("{:.9}", self.buffering_p99.as_secs_f64()));
        kv("invariant_failures", self.invariant_failures.len().to_string());
        for f in &self.invariant_failures {
            kv("invariant_failure", f.clone());
        }
        s
    }
}

/// Timing trace for offline processing-time models.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimingTrace {
    /// Arrival time of every packet reaching the engine.
    pub arrivals: Vec<SimTime>,
    /// Time of every timer check and the descriptors it examined.
    pub checks: Vec<(SimTime, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<ErroneousRecord>,
    /// Time each collected packet spent buffered, in collection order.
    pub buffering: Vec<Duration>,
    pub transcripts: Vec<Transcript>,
    pub events: Vec<String>,
    pub metrics: Vec<MetricsSample>,
    pub timing: TimingTrace,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for m in &self.metrics {
            s.push_str(&m.line());
            s.push('\n');
        }
        s
    }
}

/// Nearest-rank quantile of sorted data, `None` when empty.
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Packet,
    Timer,
    Clean,
    Tick,
    Control,
    Sync,
    Metrics,
}

#[derive(Debug)]
struct Injected {
    seq: u64,
    pkt: PacketRecord,
}

impl PartialEq for Injected {
    fn eq(&self, other: &Self) -> bool {
        (self.pkt.ts, self.seq) == (other.pkt.ts, other.seq)
    }
}

impl Eq for Injected {}

impl PartialOrd for Injected {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Injected {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.pkt.ts, self.seq).cmp(&(other.pkt.ts, other.seq))
    }
}

fn describe(p: &PacketRecord) -> String {
    let extra = match p.proto {
        Proto::Tcp => p.tcp_flags.letters(),
        Proto::Icmp => format!("{}/{}", p.icmp_type, p.icmp_code),
        _ => "-".into(),
    };
    format!("{}:{}>{}:{} {} {}", p.src_ip, p.src_port, p.dst_ip, p.dst_port, p.proto.name(), extra)
}

fn action_name(a: &FsdAction) -> &'static str {
    match a {
        FsdAction::Buffered => "buffered",
        FsdAction::StoredDuplicate => "stored_duplicate",
        FsdAction::DroppedDuplicate => "dropped_duplicate",
        FsdAction::BenignDetected(_) => "benign",
        FsdAction::DroppedTransient => "dropped_transient",
        FsdAction::DroppedRingFull => "dropped_ring_full",
        FsdAction::DroppedBufferFull => "dropped_buffer_full",
    }
}

/// The wired pipeline.
pub struct Pipeline {
    net: Arc<NetworkConfig>,
    cfg: PipelineConfig,
    switch: SwitchSim,
    fsd: FsdEngine,
    control: Controller,
    collector: Collector,
    agent: Option<Box<dyn Agent>>,
    opts: ReplayOptions,
}

impl Pipeline {
    /// Builds every component. Loads the whitelist file named in the
    /// configuration, if any. An agent answers responder replies whenever the
    /// responder is enabled.
    pub fn new(cfg: PipelineConfig, sink: Box<dyn RecordSink>) -> Result<Self, ReplayError> {
        cfg.network.validate()?;
        let net = Arc::new(cfg.network.clone());
        let switch = SwitchSim::new(net.clone(), &cfg.switch, cfg.control.latency);
        let fsd = FsdEngine::new(net.clone(), cfg.fsd.clone());
        let control = Controller::new(net.clone(), &cfg.control);
        let collector = Collector::new(net.clone(), &cfg.collector, sink);
        let agent: Option<Box<dyn Agent>> =
            collector.responder().is_some().then(|| Box::new(ScannerAgent::default()) as Box<dyn Agent>);
        let mut p = Self { net, switch, fsd, control, collector, agent, opts: ReplayOptions::default(), cfg };
        if let Some(path) = p.cfg.switch.whitelist_file.clone() {
            let entries = load_whitelist(&path)?;
            p.set_whitelist(entries);
        }
        Ok(p)
    }

    /// Replaces the static whitelist. Returns the number of entries kept.
    pub fn set_whitelist(&mut self, entries: Vec<(Ipv4Addr, u16)>) -> usize {
        let kept = self.switch.set_whitelist(entries.iter().copied(), self.cfg.switch.whitelist_scope);
        self.control.set_static_entries(entries);
        kept
    }

    pub fn with_agent(mut self, agent: Option<Box<dyn Agent>>) -> Self {
        self.agent = agent;
        self
    }

    pub fn with_options(mut self, opts: ReplayOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn switch(&self) -> &SwitchSim {
        &self.switch
    }

    pub fn fsd(&self) -> &FsdEngine {
        &self.fsd
    }

    pub fn controller(&self) -> &Controller {
        &self.control
    }

    /// Replays `trace` to completion. Timestamps are divided by the configured
    /// speed factor; a packet stamped earlier than its predecessor is delivered
    /// at the predecessor's time and counted as reordered.
    pub fn run<I: IntoIterator<Item = PacketRecord>>(mut self, trace: I) -> RunOutput {
        let mut run = Run::new(&self);
        let mut trace = trace.into_iter();
        let speed = self.cfg.replay.speed_factor;
        let mut last_trace = SimTime::ZERO;
        let mut next_trace = |run: &mut Run| -> Option<PacketRecord> {
            let mut p = trace.next()?;
            if speed != 1.0 {
                p.ts = SimTime::from_secs_f64(p.ts.as_secs_f64() / speed);
            }
            if p.ts < last_trace {
                run.out.summary.reordered += 1;
                p.ts = last_trace;
            }
            last_trace = p.ts;
            Some(p)
        };
        let mut pending_trace = next_trace(&mut run);
        let p_d = self.net.timers.p_d;
        let qi = self.net.timers.query_interval;
        let ci = self.cfg.fsd.clean_interval;
        let mi = self.cfg.replay.metrics_interval;

        loop {
            let now = run.clock.now();
            let t_pkt = match (&pending_trace, run.injected.peek()) {
                (Some(p), Some(Reverse(i))) => Some(p.ts.min(i.pkt.ts)),
                (Some(p), None) => Some(p.ts),
                (None, Some(Reverse(i))) => Some(i.pkt.ts),
                (None, None) => None,
            };
            let t_timer = self.fsd.next_deadline().map(|d| {
                let t = run.last_timer.map_or(d.max(now), |l| d.max(now).max(l + p_d));
                t.align_up(p_d)
            });
            let t_control = (!self.control.queue().is_empty()).then(|| now.max(self.control.busy_until()));
            let t_sync = run.syncs.front().map(|s| s.0);
            let driving = [t_pkt, t_timer, t_control, t_sync].into_iter().flatten().min();
            let Some(horizon) = driving else { break };
            let t_clean = (self.fsd.occupancy().benign_entries > 0)
                .then(|| run.last_clean.map_or(now, |l| now.max(l + ci)).align_up(ci));
            let t_tick =
                (self.switch.rule_count() > 0).then(|| run.last_tick.map_or(now, |l| now.max(l + qi)).align_up(qi));
            let t_metrics = Some(run.next_metrics);
            let candidates = [
                (t_pkt, Phase::Packet),
                (t_timer, Phase::Timer),
                (t_clean, Phase::Clean),
                (t_tick, Phase::Tick),
                (t_control, Phase::Control),
                (t_sync, Phase::Sync),
                (t_metrics, Phase::Metrics),
            ];
            let (t, phase) =
                candidates.into_iter().filter_map(|(t, ph)| t.map(|t| (t, ph))).min().expect("a driving event exists");
            debug_assert!(t <= horizon.max(t));
            if let Err(e) = run.clock.advance_to(t) {
                run.out.summary.invariant_failures.push(e.to_string());
            }
            match phase {
                Phase::Packet => {
                    let from_trace = match (&pending_trace, run.injected.peek()) {
                        (Some(p), Some(Reverse(i))) => p.ts <= i.pkt.ts,
                        (Some(_), None) => true,
                        _ => false,
                    };
                    let pkt = if from_trace {
                        let p = pending_trace.take().expect("peeked");
                        pending_trace = next_trace(&mut run);
                        p
                    } else {
                        run.injected.pop().expect("peeked").0.pkt
                    };
                    self.on_packet(&mut run, pkt, t);
                }
                Phase::Timer => {
                    run.last_timer = Some(t);
                    let expired = self.fsd.check_timers(t);
                    if self.opts.timing_trace {
                        run.out.timing.checks.push((t, self.fsd.last_examined()));
                    }
                    for e in expired {
                        self.collect(&mut run, e, t);
                    }
                }
                Phase::Clean => {
                    let grid = t.as_nanos() / crate::time::duration_nanos(ci).max(1);
                    let skipped = match run.last_clean {
                        Some(l) => grid - l.as_nanos() / crate::time::duration_nanos(ci).max(1) - 1,
                        None => grid,
                    };
                    run.last_clean = Some(t);
                    if skipped > 0 {
                        self.fsd.skip_clean_passes(skipped);
                    }
                    let n = self.fsd.clean_benign(t);
                    if n > 0 {
                        run.log(t, format_args!("clean removed={n}"));
                    }
                }
                Phase::Tick => {
                    run.last_tick = Some(t);
                    self.switch.tick(t, qi);
                    let notes = self.switch.notify_out().drain();
                    for n in &notes {
                        let k = n.rule_key;
                        run.log(
                            t,
                            format_args!("idle {}:{}/{} {:?}", k.ip, k.port, Proto::from(k.proto).name(), k.side),
                        );
                    }
                    self.control.on_idle_notifications(&notes, t);
                    // The poll also refreshes hosts whose rules are still in place.
                    for ip in &run.synced_hosts {
                        self.fsd.liveness_rule_sync(*ip, RuleSyncEvent::Installed, t);
                    }
                }
                Phase::Control => {
                    let report = self.control.drain_and_apply(t, &mut self.switch);
                    for c in &report.calls {
                        let kind = match c.kind {
                            BatchKind::Install => "install",
                            BatchKind::Delete => "delete",
                        };
                        run.log(
                            t,
                            format_args!(
                                "{kind} n={} applied={} rejected={} done={}",
                                c.size,
                                c.applied,
                                c.rejected,
                                t + c.latency
                            ),
                        );
                        run.latency_total += c.latency.as_secs_f64();
                        run.ops_total += c.size as u64;
                    }
                    for (ip, ev) in report.syncs {
                        run.syncs.push_back((report.completes_at, ip, ev));
                    }
                }
                Phase::Sync => {
                    let (_, ip, ev) = run.syncs.pop_front().expect("peeked");
                    run.log(t, format_args!("sync {ip} {ev:?}"));
                    match ev {
                        RuleSyncEvent::Installed => run.synced_hosts.insert(ip),
                        RuleSyncEvent::Deleted => run.synced_hosts.remove(&ip),
                    };
                    self.fsd.liveness_rule_sync(ip, ev, t);
                }
                Phase::Metrics => {
                    run.next_metrics = t + mi;
                    self.sample(&mut run, t);
                }
            }
        }
        let end = run.clock.now();
        if run.out.metrics.last().is_none_or(|m| m.ts != end) {
            self.sample(&mut run, end);
        }
        self.finish(run, end)
    }

    fn on_packet(&mut self, run: &mut Run, pkt: PacketRecord, now: SimTime) {
        run.out.summary.packets += 1;
        match self.switch.process_packet(&pkt, now) {
            Ok(SwitchAction::DroppedWhitelist) => run.log(now, format_args!("pkt {} switch=whitelist", describe(&pkt))),
            Ok(SwitchAction::DroppedFlowRule) => run.log(now, format_args!("pkt {} switch=rule", describe(&pkt))),
            Err(_) => run.log(now, format_args!("pkt {} switch=mirror_full", describe(&pkt))),
            Ok(SwitchAction::Mirrored) => {
                let m = self.switch.mirror_out().pop().expect("just mirrored");
                if self.opts.timing_trace {
                    run.out.timing.arrivals.push(now);
                }
                let action = self.fsd.on_packet(m, now);
                run.log(now, format_args!("pkt {} switch=mirror fsd={}", describe(&pkt), action_name(&action)));
                if let FsdAction::BenignDetected(rules) = action {
                    self.control.enqueue_installs(rules);
                }
                for e in self.fsd.take_collected() {
                    self.collect(run, e, now);
                }
            }
        }
    }

    fn collect(&mut self, run: &mut Run, exp: ExpiredPacket, now: SimTime) {
        let dst = exp.pkt.real_dst(self.net.anonymization_key);
        let alive = self.fsd.is_alive(dst, now).unwrap_or(false);
        let rec = self.collector.record(&exp, alive);
        run.log(now, format_args!("collect {} {}", exp.reason.as_str(), describe(&exp.pkt.pkt)));
        run.out.buffering.push(exp.collected_at.since(exp.t_arr));
        run.out.records.push(rec);
        if let Some(reply) = self.collector.respond(&exp, now) {
            run.log(now, format_args!("reply {}", describe(&reply)));
            if let Some(agent) = self.agent.as_mut() {
                for mut p in agent.on_reply(&reply) {
                    p.ts = p.ts.max(now);
                    run.out.summary.injected += 1;
                    run.inject_seq += 1;
                    run.injected.push(Reverse(Injected { seq: run.inject_seq, pkt: p }));
                }
            }
        }
    }

    fn sample(&self, run: &mut Run, t: SimTime) {
        let occ = self.fsd.occupancy();
        run.out.metrics.push(MetricsSample {
            ts: t,
            ring_len: occ.ring_len,
            buffered: occ.live_descriptors,
            table_len: occ.table_len,
            benign_entries: occ.benign_entries,
            pending_ops: self.control.queue().len(),
            rules: self.switch.rule_count(),
            collected: self.collector.stats().records,
        });
    }

    fn finish(mut self, mut run: Run, end: SimTime) -> RunOutput {
        if let Err(e) = self.collector.finish() {
            run.out.summary.invariant_failures.push(format!("collector output: {e}"));
        }
        if let Err(e) = self.fsd.check_invariants() {
            run.out.summary.invariant_failures.push(e);
        }
        run.out.transcripts = self.collector.take_transcripts();
        let sw = self.switch.counters();
        let fs = self.fsd.stats();
        let cs = self.control.stats();
        let col = self.collector.stats();
        let s = &mut run.out.summary;
        s.end_time = end;
        s.whitelist_drops = sw.whitelist_hits;
        s.rule_drops = sw.dynamic_hits;
        s.mirrored = sw.mirrored;
        s.mirror_full = sw.backpressure_drops;
        s.mirror_high_watermark = self.switch.mirror_out().high_watermark();
        s.buffered = fs.buffered;
        s.benign_flows = fs.benign_detected;
        s.duplicate_drops = fs.dropped_duplicates;
        s.duplicates_stored = fs.stored_duplicates;
        s.transient_drops = fs.dropped_transient;
        s.ring_full = fs.ring_full;
        s.buffer_full = fs.buffer_full;
        s.erroneous = col.records;
        s.erroneous_incoming = col.incoming;
        s.erroneous_outgoing = col.outgoing;
        s.icmp_errors = col.icmp_errors;
        s.sink_errors = col.sink_errors;
        s.rules_installed = sw.rules_installed;
        s.rules_rejected = sw.rules_rejected;
        s.rules_deleted = sw.rules_deleted;
        s.idle_notifications = sw.idle_notifications;
        s.install_calls = cs.install_calls;
        s.delete_calls = cs.delete_calls;
        s.ops_abandoned = cs.ops_abandoned;
        s.pending_high_watermark = self.control.queue().high_watermark();
        s.mean_per_rule_latency = if run.ops_total == 0 { 0.0 } else { run.latency_total / run.ops_total as f64 };
        s.responder_replies = col.replies;
        s.transcripts = run.out.transcripts.len() as u64;
        if s.packets > 0 {
            s.filtering_efficiency = (s.whitelist_drops + s.rule_drops) as f64 / s.packets as f64;
            s.whitelist_share = s.whitelist_drops as f64 / s.packets as f64;
        }
        let mut b = run.out.buffering.clone();
        b.sort_unstable();
        s.buffering_p75 = nearest_rank(&b, 0.75).unwrap_or_default();
        s.buffering_p95 = nearest_rank(&b, 0.95).unwrap_or_default();
        s.buffering_p99 = nearest_rank(&b, 0.99).unwrap_or_default();
        if run.out.records.iter().any(|r| r.reason == CollectReason::IcmpError && !r.pkt.is_icmp_error()) {
            s.invariant_failures.push("icmp_error reason on a non-error packet".into());
        }
        run.out
    }
}

struct Run {
    clock: VirtualClock,
    injected: BinaryHeap<Reverse<Injected>>,
    inject_seq: u64,
    syncs: VecDeque<(SimTime, Ipv4Addr, RuleSyncEvent)>,
    synced_hosts: BTreeSet<Ipv4Addr>,
    last_timer: Option<SimTime>,
    last_clean: Option<SimTime>,
    last_tick: Option<SimTime>,
    next_metrics: SimTime,
    latency_total: f64,
    ops_total: u64,
    event_log: bool,
    out: RunOutput,
}

impl Run {
    fn new(p: &Pipeline) -> Self {
        Self {
            clock: VirtualClock::new(),
            injected: BinaryHeap::new(),
            inject_seq: 0,
            syncs: VecDeque::new(),
            synced_hosts: BTreeSet::new(),
            last_timer: None,
            last_clean: None,
            last_tick: None,
            next_metrics: SimTime::ZERO,
            latency_total: 0.0,
            ops_total: 0,
            event_log: p.opts.event_log,
            out: RunOutput::default(),
        }
    }

    fn log(&mut self, t: SimTime, what: std::fmt::Arguments<'_>) {
        if self.event_log {
            self.out.events.push(format!("{t} {what}"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::VecSink;
    use crate::config::ServiceEndpoint;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn pipeline(cfg: PipelineConfig) -> Pipeline {
        Pipeline::new(cfg, Box::new(VecSink::default()))
            .unwrap()
            .with_options(ReplayOptions { event_log: true, timing_trace: true })
    }

    #[test]
    fn empty_trace_ends_immediately() {
        let out = pipeline(PipelineConfig::default()).run(Vec::new());
        assert_eq!(out.summary.packets, 0);
        assert!(out.records.is_empty());
        assert_eq!(out.metrics.len(), 1);
        assert!(out.summary.invariant_failures.is_empty());
    }

    #[test]
    fn unanswered_syn_is_collected_at_dt() {
        let syn = PacketBuilder::tcp(ip("7.7.7.7"), 1, ip("10.0.0.50"), 23, TcpFlags::SYN).at(ms(5)).build();
        let out = pipeline(PipelineConfig::default()).run(vec![syn]);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.buffering, vec![Duration::from_secs(1)]);
        assert_eq!(out.summary.end_time, ms(1005));
    }

    #[test]
    fn answered_flow_installs_rules_then_filters() {
        let mut cfg = PipelineConfig::default();
        cfg.network.timers.rule_ttl = Duration::from_secs(2);
        let c = ip("10.0.0.9");
        let s = ip("93.184.216.34");
        let mut trace = vec![
            PacketBuilder::udp(c, 5000, s, 53).at(ms(0)).build(),
            PacketBuilder::udp(s, 53, c, 5000).at(ms(3)).build(),
        ];
        for i in 0..10 {
            trace.push(PacketBuilder::udp(c, 5000, s, 53).at(ms(100 + i)).build());
        }
        let out = pipeline(cfg).run(trace);
        let s = &out.summary;
        assert_eq!((s.benign_flows, s.rules_installed, s.rule_drops, s.erroneous), (1, 2, 10, 0));
        assert!(out.events.iter().any(|e| e.contains("install n=2 applied=2")));
        assert!(out.summary.invariant_failures.is_empty(), "{:?}", out.summary.invariant_failures);
        // Ended without waiting for the rules to age out.
        assert!(s.end_time < SimTime::from_secs(1));
    }

    #[test]
    fn impersonated_connection_yields_transcript() {
        let mut cfg = PipelineConfig::default();
        let srv = ServiceEndpoint { ip: ip("10.0.0.200"), port: 80, proto: 6 };
        cfg.network.impersonation.insert(srv);
        let syn = PacketBuilder::tcp(ip("5.5.5.5"), 4000, srv.ip, 80, TcpFlags::SYN).seq(1000).at(ms(1)).build();
        let out = pipeline(cfg).run(vec![syn]);
        assert_eq!(out.transcripts.len(), 1, "{:#?}", out.events);
        assert_eq!(out.transcripts[0].payload, ScannerAgent::default().payload);
        assert!(out.records.iter().all(|r| !r.internal_host_anon));
        assert_eq!(out.summary.injected, 2);
    }

    #[test]
    fn reordered_trace_packets_are_clamped() {
        let a = PacketBuilder::udp(ip("1.1.1.1"), 1, ip("10.0.0.50"), 2).at(ms(10)).build();
        let b = PacketBuilder::udp(ip("1.1.1.2"), 1, ip("10.0.0.50"), 2).at(ms(5)).build();
        let out = pipeline(PipelineConfig::default()).run(vec![a, b]);
        assert_eq!(out.summary.reordered, 1);
        assert!(out.records.iter().all(|r| r.ts == ms(10)));
    }

    #[test]
    fn speed_factor_compresses_time() {
        let mut cfg = PipelineConfig::default();
        cfg.replay.speed_factor = 2.0;
        let a = PacketBuilder::udp(ip("1.1.1.1"), 1, ip("10.0.0.50"), 2).at(ms(10)).build();
        let out = pipeline(cfg).run(vec![a]);
        assert_eq!(out.records[0].ts, ms(5));
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<u32> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 0.99), Some(99));
        assert_eq!(nearest_rank(&v, 0.0), Some(1));
        assert_eq!(nearest_rank(&v, 1.0), Some(100));
        assert_eq!(nearest_rank::<u32>(&[], 0.5), None);
    }
}
