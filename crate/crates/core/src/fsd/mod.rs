//! Flow-state detection engine.
//!
//! Every mirrored packet lands here. The first packet of a flow is buffered
//! with a descriptor in arrival order; an answer in the opposite direction
//! marks the flow benign and yields the two switch rules for the responder;
//! a packet still unanswered after its detection timeout is handed to the
//! collector. Timeouts are checked lazily from the ring head, a bounded
//! number of descriptors at a time.
//!
//! Impersonated destinations use a shorter timeout. They get their own ring
//! so their descriptors never wait behind older ones with the longer timeout.

pub mod buffer;
pub mod liveness;
pub mod ring;
pub mod table;

use std::net::Ipv4Addr;
use std::sync::Arc;

use crate::anonymizer::MirroredPacket;
use crate::config::{FsdConfig, NetworkConfig};
use crate::flow::{classify_response, dst_endpoint, make_flow_key, src_endpoint, ResponseClass};
use crate::switch::MatRule;
use crate::time::SimTime;

use buffer::PacketBuffer;
pub use liveness::{Liveness, NotInternal, RuleSyncEvent};
use ring::{Descriptor, DescriptorRing};
use table::{DescRef, FlowEntry, FlowHandle, FlowStatus, FlowTable};

const RING_DT: usize = 0;
const RING_IMPERSONATED: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsdAction {
    /// First packet of a flow, now waiting for an answer.
    Buffered,
    /// Same-direction packet of a waiting flow, stored for collection.
    StoredDuplicate,
    DroppedDuplicate,
    /// The packet answered a waiting flow; install these rules.
    BenignDetected(Vec<MatRule>),
    /// The flow is already benign but its rules are not filtering yet.
    DroppedTransient,
    DroppedRingFull,
    DroppedBufferFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CollectReason {
    DtExpired,
    IcmpError,
}

impl CollectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectReason::DtExpired => "dt_expired",
            CollectReason::IcmpError => "icmp_error",
        }
    }
}

/// A packet declared erroneous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpiredPacket {
    pub pkt: MirroredPacket,
    pub t_arr: SimTime,
    pub collected_at: SimTime,
    pub reason: CollectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsdStats {
    pub packets: u64,
    pub buffered: u64,
    pub stored_duplicates: u64,
    pub dropped_duplicates: u64,
    pub benign_detected: u64,
    pub dropped_transient: u64,
    pub ring_full: u64,
    pub buffer_full: u64,
    pub expired: u64,
    /// Collected on packet arrival rather than by the timer check.
    pub expired_on_arrival: u64,
    pub timer_checks: u64,
    pub descriptors_popped: u64,
    pub cleaned: u64,
    pub clean_passes: u64,
}

/// Point-in-time occupancy, for the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FsdOccupancy {
    pub ring_len: usize,
    pub live_descriptors: usize,
    pub table_len: usize,
    pub benign_entries: usize,
}

pub struct FsdEngine {
    net: Arc<NetworkConfig>,
    cfg: FsdConfig,
    table: FlowTable,
    rings: [DescriptorRing; 2],
    buffer: PacketBuffer,
    liveness: Liveness,
    clean_cursor: usize,
    benign_entries: usize,
    collected: Vec<ExpiredPacket>,
    last_examined: usize,
    stats: FsdStats,
}

impl FsdEngine {
    pub fn new(net: Arc<NetworkConfig>, cfg: FsdConfig) -> Self {
        let liveness = Liveness::new(net.internal.clone(), net.timers.t_alive);
        Self {
            table: FlowTable::new(cfg.buckets, cfg.hash_seed),
            rings: [DescriptorRing::new(cfg.ring_capacity), DescriptorRing::new(cfg.ring_capacity)],
            buffer: PacketBuffer::new(cfg.buffer_capacity),
            liveness,
            clean_cursor: 0,
            benign_entries: 0,
            collected: Vec::new(),
            last_examined: 0,
            stats: FsdStats::default(),
            net,
            cfg,
        }
    }

    pub fn on_packet(&mut self, m: MirroredPacket, now: SimTime) -> FsdAction {
        self.stats.packets += 1;
        let key = self.net.anonymization_key;
        if m.meta.src_internal {
            self.liveness.mark_seen(m.real_src(key), now);
        }
        let fk = make_flow_key(&m.pkt);
        if let Some(h) = self.table.find(&fk) {
            let entry = self.table.get(h).expect("live handle");
            match entry.status {
                FlowStatus::Benign => {
                    self.stats.dropped_transient += 1;
                    return FsdAction::DroppedTransient;
                }
                FlowStatus::Suspicious if now.since(entry.t_arr) >= entry.dt => {
                    self.stats.expired_on_arrival += 1;
                    self.expire_flow(h, now);
                }
                FlowStatus::Suspicious => return self.on_waiting_flow(h, m, now),
            }
        }
        self.start_flow(m, now)
    }

    fn start_flow(&mut self, m: MirroredPacket, now: SimTime) -> FsdAction {
        let proto = m.pkt.proto.number();
        let dst = dst_endpoint(&m.pkt);
        let impersonated = m.meta.impersonated && self.net.is_impersonated(dst, proto);
        let ring = if impersonated { RING_IMPERSONATED } else { RING_DT };
        if self.rings[ring].is_full() {
            self.stats.ring_full += 1;
            return FsdAction::DroppedRingFull;
        }
        let entry = FlowEntry {
            key: make_flow_key(&m.pkt),
            status: FlowStatus::Suspicious,
            t_arr: now,
            t_resp: None,
            initiator: src_endpoint(&m.pkt),
            responder: None,
            // Decided from the metadata: an obfuscated address may collide with an impersonated one.
            dt: if impersonated { self.net.timers.dt_impersonated } else { self.net.timers.dt },
            descriptor: None,
            duplicates: Vec::new(),
        };
        let slot = match self.buffer.store(m) {
            Ok(s) => s,
            Err(_) => {
                self.stats.buffer_full += 1;
                return FsdAction::DroppedBufferFull;
            }
        };
        let h = self.table.insert(entry);
        let seq = self.rings[ring].push(Descriptor { t_arr: now, flow: Some(h), slot: Some(slot) }).expect("checked");
        self.table.get_mut(h).expect("just inserted").descriptor = Some(DescRef { ring, seq });
        self.stats.buffered += 1;
        FsdAction::Buffered
    }

    fn primary_packet(&mut self, entry_desc: DescRef) -> &MirroredPacket {
        let slot = self.rings[entry_desc.ring]
            .get_mut(entry_desc.seq)
            .and_then(|d| d.slot)
            .expect("waiting flow holds a slot");
        self.buffer.get(slot).expect("occupied slot")
    }

    fn on_waiting_flow(&mut self, h: FlowHandle, m: MirroredPacket, now: SimTime) -> FsdAction {
        let desc = self.table.get(h).and_then(|e| e.descriptor).expect("waiting flow has a descriptor");
        let request = self.primary_packet(desc);
        let answered = classify_response(&request.pkt, &m.pkt) == ResponseClass::Response;
        let request_impersonated = request.meta.impersonated;
        if answered {
            let responder_ip = m.real_src(self.net.anonymization_key);
            let responder_port = m.pkt.src_port;
            let proto = m.pkt.proto.number();
            let entry = self.table.get_mut(h).expect("live handle");
            entry.status = FlowStatus::Benign;
            entry.t_resp = Some(now);
            entry.responder = Some(src_endpoint(&m.pkt));
            let descs: Vec<DescRef> = entry.descriptor.take().into_iter().chain(entry.duplicates.drain(..)).collect();
            for d in descs {
                if let Some(slot) = self.null_descriptor(d) {
                    self.buffer.take(slot);
                }
            }
            self.benign_entries += 1;
            self.stats.benign_detected += 1;
            return FsdAction::BenignDetected(
                MatRule::pair(responder_ip, responder_port, proto, self.net.timers.rule_ttl).to_vec(),
            );
        }
        let store = self.cfg.store_duplicates || request_impersonated;
        if !store {
            self.stats.dropped_duplicates += 1;
            return FsdAction::DroppedDuplicate;
        }
        let ring = desc.ring;
        if self.rings[ring].is_full() {
            self.stats.ring_full += 1;
            return FsdAction::DroppedRingFull;
        }
        let slot = match self.buffer.store(m) {
            Ok(s) => s,
            Err(_) => {
                self.stats.buffer_full += 1;
                return FsdAction::DroppedBufferFull;
            }
        };
        let seq = self.rings[ring].push(Descriptor { t_arr: now, flow: Some(h), slot: Some(slot) }).expect("checked");
        self.table.get_mut(h).expect("live handle").duplicates.push(DescRef { ring, seq });
        self.stats.stored_duplicates += 1;
        FsdAction::StoredDuplicate
    }

    /// Nulls a descriptor in place and returns the slot it held.
    fn null_descriptor(&mut self, d: DescRef) -> Option<u32> {
        let desc = self.rings[d.ring].get_mut(d.seq)?;
        desc.flow = None;
        desc.slot.take()
    }

    /// Removes a waiting flow and queues its buffered packets for collection.
    fn expire_flow(&mut self, h: FlowHandle, now: SimTime) {
        let entry = self.table.remove(h).expect("live handle");
        for d in entry.descriptor.into_iter().chain(entry.duplicates) {
            let t_arr = self.rings[d.ring].get_mut(d.seq).map(|x| x.t_arr).unwrap_or(entry.t_arr);
            if let Some(slot) = self.null_descriptor(d) {
                let pkt = self.buffer.take(slot);
                let reason = if pkt.pkt.is_icmp_error() { CollectReason::IcmpError } else { CollectReason::DtExpired };
                self.stats.expired += 1;
                self.collected.push(ExpiredPacket { pkt, t_arr, collected_at: now, reason });
            }
        }
    }

    /// Lazy timeout check. Pops at most `d_max` descriptors per ring and stops
    /// at the first live descriptor still inside its timeout. Returns every
    /// packet collected since the previous call, including those expired on
    /// packet arrival.
    pub fn check_timers(&mut self, now: SimTime) -> Vec<ExpiredPacket> {
        self.stats.timer_checks += 1;
        let d_max = self.net.timers.d_max;
        let mut examined = 0;
        for r in [RING_DT, RING_IMPERSONATED] {
            let mut popped = 0;
            while popped < d_max {
                let Some(front) = self.rings[r].front().copied() else { break };
                examined += 1;
                if let Some(h) = front.flow {
                    let dt = self.table.get(h).expect("live descriptor points at its flow").dt;
                    if now.since(front.t_arr) < dt {
                        break;
                    }
                    self.expire_flow(h, now);
                }
                self.rings[r].pop();
                popped += 1;
            }
            self.stats.descriptors_popped += popped as u64;
        }
        self.last_examined = examined;
        std::mem::take(&mut self.collected)
    }

    /// Packets collected on arrival since the last drain, without running
    /// the timer check.
    pub fn take_collected(&mut self) -> Vec<ExpiredPacket> {
        std::mem::take(&mut self.collected)
    }

    /// Descriptors looked at by the last `check_timers` call.
    pub fn last_examined(&self) -> usize {
        self.last_examined
    }

    /// Earliest time at which a timer check can make progress: now for a null
    /// head or pending output, otherwise the head's expiry.
    pub fn next_deadline(&self) -> Option<SimTime> {
        if !self.collected.is_empty() {
            return Some(SimTime::ZERO);
        }
        self.rings
            .iter()
            .filter_map(|r| {
                let d = r.front()?;
                Some(match d.flow {
                    None => SimTime::ZERO,
                    Some(h) => d.t_arr + self.table.get(h).map(|e| e.dt).unwrap_or_default(),
                })
            })
            .min()
    }

    /// Visits the next `ceil(alpha_ht * buckets)` buckets and drops benign
    /// entries answered more than `t_inst` ago.
    pub fn clean_benign(&mut self, now: SimTime) -> usize {
        self.stats.clean_passes += 1;
        let buckets = self.table.bucket_count();
        let n = ((self.net.timers.alpha_ht * buckets as f64).ceil() as usize).clamp(1, buckets);
        if self.benign_entries == 0 {
            self.clean_cursor = (self.clean_cursor + n) % buckets;
            return 0;
        }
        let t_inst = self.net.timers.t_inst;
        let mut removed = 0;
        for _ in 0..n {
            removed += self.table.retain_bucket(self.clean_cursor, |e| {
                e.status == FlowStatus::Benign && e.t_resp.is_some_and(|t| now.since(t) > t_inst)
            });
            self.clean_cursor = (self.clean_cursor + 1) % buckets;
        }
        self.benign_entries -= removed;
        self.stats.cleaned += removed as u64;
        removed
    }

    /// Accounts for `passes` cleaning passes that a scheduler skipped while
    /// no benign entry existed. Equivalent to having run them then.
    pub fn skip_clean_passes(&mut self, passes: u64) {
        let buckets = self.table.bucket_count();
        let n = ((self.net.timers.alpha_ht * buckets as f64).ceil() as usize).clamp(1, buckets) as u64;
        self.clean_cursor = ((self.clean_cursor as u64 + (passes % buckets as u64) * n) % buckets as u64) as usize;
        self.stats.clean_passes += passes;
    }

    pub fn clean_cursor(&self) -> usize {
        self.clean_cursor
    }

    pub fn is_alive(&self, ip: Ipv4Addr, now: SimTime) -> Result<bool, NotInternal> {
        self.liveness.is_alive(ip, now)
    }

    pub fn liveness_rule_sync(&mut self, ip: Ipv4Addr, event: RuleSyncEvent, now: SimTime) {
        self.liveness.rule_sync(ip, event, now);
    }

    pub fn stats(&self) -> &FsdStats {
        &self.stats
    }

    pub fn occupancy(&self) -> FsdOccupancy {
        FsdOccupancy {
            ring_len: self.rings.iter().map(DescriptorRing::len).sum(),
            live_descriptors: self.buffer.used(),
            table_len: self.table.len(),
            benign_entries: self.benign_entries,
        }
    }

    pub fn flow_status(&self, key: &crate::flow::FlowKey) -> Option<FlowStatus> {
        self.table.find(key).and_then(|h| self.table.get(h)).map(|e| e.status)
    }

    pub fn table(&self) -> &FlowTable {
        &self.table
    }

    /// Structural self-check over ring, table and buffer.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut live_slots = 0;
        for (r, ring) in self.rings.iter().enumerate() {
            let mut prev = SimTime::ZERO;
            for d in ring.iter() {
                if d.t_arr < prev {
                    return Err(format!("ring {r}: arrival times decrease"));
                }
                prev = d.t_arr;
                match (d.flow, d.slot) {
                    (Some(h), Some(_)) => {
                        live_slots += 1;
                        let e = self.table.get(h).ok_or(format!("ring {r}: descriptor points at a removed flow"))?;
                        if e.status != FlowStatus::Suspicious {
                            return Err(format!("ring {r}: live descriptor for a benign flow"));
                        }
                    }
                    (None, None) => {}
                    _ => return Err(format!("ring {r}: half-null descriptor")),
                }
            }
        }
        if live_slots != self.buffer.used() {
            return Err(format!("{live_slots} live descriptors but {} buffer slots used", self.buffer.used()));
        }
        let mut benign = 0;
        for (_, e) in self.table.iter() {
            match e.status {
                FlowStatus::Suspicious => {
                    if e.descriptor.is_none() || e.t_resp.is_some() {
                        return Err(format!("suspicious flow {} without descriptor", e.key));
                    }
                }
                FlowStatus::Benign => {
                    benign += 1;
                    if e.descriptor.is_some() || e.t_resp.is_none_or(|t| t < e.t_arr) {
                        return Err(format!("benign flow {} in inconsistent state", e.key));
                    }
                }
            }
        }
        if benign != self.benign_entries {
            return Err(format!("benign count {} disagrees with table {}", self.benign_entries, benign));
        }
        Ok(())
    }
}
