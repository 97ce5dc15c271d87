//! Brute-force reference models, written without the library's data structures.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;

use errmon_core::anonymizer::deobfuscate_ip;
use errmon_core::collector::{Direction, DstLiveness, RecordRow};
use errmon_core::config::AnonKey;
use errmon_core::packet::{PacketRecord, Proto};

type Side = (Ipv4Addr, u16);

fn sides(p: &PacketRecord) -> (Side, Side) {
    ((p.src_ip, p.src_port), (p.dst_ip, p.dst_port))
}

fn is_error(p: &PacketRecord) -> bool {
    p.proto == Proto::Icmp && matches!(p.icmp_type, 3 | 11 | 12)
}

fn flow_of(p: &PacketRecord) -> (u8, Side, Side) {
    let (a, b) = sides(p);
    (p.proto.number(), a.min(b), a.max(b))
}

fn answers(req: &PacketRecord, cand: &PacketRecord) -> bool {
    let (rs, rd) = sides(req);
    let (cs, cd) = sides(cand);
    !is_error(req) && !is_error(cand) && cs == rd && cd == rs
}

enum Window {
    Idle,
    Open { t0: u64, members: Vec<usize> },
    Answered,
}

/// Indices of the packets an ideal engine declares erroneous. Packets are
/// taken in order; every flow is a small automaton of detection windows.
pub fn erroneous_indices(trace: &[PacketRecord], dt_ns: u64, store_duplicates: bool) -> Vec<usize> {
    let mut flows: HashMap<(u8, Side, Side), Window> = HashMap::new();
    let mut out = Vec::new();
    for (i, p) in trace.iter().enumerate() {
        let t = p.ts.as_nanos();
        let w = flows.entry(flow_of(p)).or_insert(Window::Idle);
        if let Window::Open { t0, members } = w {
            if t - *t0 >= dt_ns {
                out.append(members);
                *w = Window::Idle;
            }
        }
        match w {
            Window::Idle => *w = Window::Open { t0: t, members: vec![i] },
            Window::Open { members, .. } => {
                if answers(&trace[members[0]], p) {
                    *w = Window::Answered;
                } else if store_duplicates {
                    members.push(i);
                }
            }
            Window::Answered => {}
        }
    }
    for w in flows.into_values() {
        if let Window::Open { mut members, .. } = w {
            out.append(&mut members);
        }
    }
    out.sort_unstable();
    out
}

/// Reply kinds of the handshake-capture-teardown model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seg {
    Syn,
    Ack,
    Data,
    Fin,
    Rst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Nothing,
    /// SYN-ACK acknowledging `ack`.
    SynAck {
        ack: u32,
    },
    /// Bare RST with `seq`.
    Rst {
        seq: u32,
    },
    /// RST-ACK with the server's next sequence number and `ack`.
    RstAck {
        ack: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Conn {
    Closed,
    HalfOpen,
    Open,
}

pub struct TcpModel {
    conn: Conn,
    /// Payloads captured so far; a close without data captures nothing.
    pub captures: Vec<Vec<u8>>,
}

impl Default for TcpModel {
    fn default() -> Self {
        Self { conn: Conn::Closed, captures: Vec::new() }
    }
}

impl TcpModel {
    /// `seq`, `ack`, `len` describe the incoming segment as sent.
    pub fn step(&mut self, seg: Seg, seq: u32, ack: u32, payload: &[u8]) -> Expect {
        let next = seq.wrapping_add(payload.len() as u32).wrapping_add(u32::from(matches!(seg, Seg::Syn | Seg::Fin)));
        let (conn, reply) = match (self.conn, seg) {
            (Conn::Closed, Seg::Syn) | (Conn::HalfOpen, Seg::Syn) => (Conn::HalfOpen, Expect::SynAck { ack: next }),
            (Conn::Closed, Seg::Rst) => (Conn::Closed, Expect::Nothing),
            (Conn::Closed, _) => (Conn::Closed, Expect::Rst { seq: ack }),
            (Conn::HalfOpen, Seg::Ack) => (Conn::Open, Expect::Nothing),
            (Conn::HalfOpen, Seg::Rst) => (Conn::Closed, Expect::Nothing),
            (Conn::HalfOpen, Seg::Data) => {
                self.captures.push(payload.to_vec());
                (Conn::Closed, Expect::RstAck { ack: next })
            }
            (Conn::HalfOpen, Seg::Fin) => (Conn::Closed, Expect::RstAck { ack: next }),
            (Conn::Open, Seg::Ack) => (Conn::Open, Expect::Nothing),
            (Conn::Open, Seg::Rst) => {
                self.captures.push(Vec::new());
                (Conn::Closed, Expect::Nothing)
            }
            (Conn::Open, Seg::Data) => {
                self.captures.push(payload.to_vec());
                (Conn::Closed, Expect::RstAck { ack: next })
            }
            (Conn::Open, Seg::Syn | Seg::Fin) => {
                self.captures.push(Vec::new());
                (Conn::Closed, Expect::RstAck { ack: next })
            }
        };
        self.conn = conn;
        reply
    }
}

/// Idle eviction by windows: a rule dies at the first query instant closing
/// `ttl_intervals` consecutive effective intervals without a match.
/// `queries` are ascending; a match at a query instant belongs to the
/// interval that instant closes. Returns the eviction instant, if any.
pub fn eviction_time(effective_at: u64, queries: &[u64], matches: &[u64], ttl_intervals: usize) -> Option<u64> {
    let effective: Vec<u64> = queries.iter().copied().filter(|&q| q >= effective_at).collect();
    let mut idle_run = 0;
    let mut prev = None;
    for &q in &effective {
        let hit = matches.iter().any(|&m| m >= effective_at && m <= q && prev.is_none_or(|p| m > p));
        idle_run = if hit { 0 } else { idle_run + 1 };
        if idle_run == ttl_intervals {
            return Some(q);
        }
        prev = Some(q);
    }
    None
}

/// Analytics by naive scans over the whole record list.
pub struct NaiveAnalytics<'a> {
    pub rows: &'a [RecordRow],
    pub key: AnonKey,
    pub internal: (u32, u32),
    pub telescope: (u32, u32),
}

fn in_net(ip: Ipv4Addr, (net, mask): (u32, u32)) -> bool {
    u32::from(ip) & mask == net
}

impl NaiveAnalytics<'_> {
    pub fn real_dst(&self, r: &RecordRow) -> Option<Ipv4Addr> {
        if r.direction != Direction::Incoming {
            return None;
        }
        let real = if r.anon == 1 { deobfuscate_ip(r.dst_ip, self.key) } else { r.dst_ip };
        (r.dst_liveness != DstLiveness::External && in_net(real, self.internal)).then_some(real)
    }

    pub fn hosts(&self) -> Vec<Ipv4Addr> {
        let mut v: Vec<_> = self.rows.iter().filter_map(|r| self.real_dst(r)).collect();
        v.sort();
        v.dedup();
        v
    }

    /// "telescope", "active" or "dark".
    pub fn class(&self, h: Ipv4Addr) -> &'static str {
        if in_net(h, self.telescope) {
            "telescope"
        } else if self.rows.iter().any(|r| self.real_dst(r) == Some(h) && r.dst_liveness == DstLiveness::Alive) {
            "active"
        } else {
            "dark"
        }
    }

    pub fn senders_of(&self, h: Ipv4Addr, hour: Option<u64>) -> usize {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter(|r| self.real_dst(r) == Some(h) && hour.is_none_or(|x| hour_of(r) == x))
            .map(|r| r.src_ip)
            .collect();
        v.sort();
        v.dedup();
        v.len()
    }

    pub fn ports_of(&self, h: Ipv4Addr, hour: u64) -> usize {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter(|r| self.real_dst(r) == Some(h) && hour_of(r) == hour)
            .map(|r| r.dst_port)
            .collect();
        v.sort();
        v.dedup();
        v.len()
    }

    pub fn histogram(&self, class: &str) -> BTreeMap<u16, u64> {
        let mut out = BTreeMap::new();
        for r in self.rows {
            if let Some(h) = self.real_dst(r) {
                if self.class(h) == class {
                    *out.entry(r.dst_port).or_insert(0) += 1;
                }
            }
        }
        out
    }

    pub fn ccdf(&self) -> Vec<(usize, f64)> {
        let counts: Vec<usize> = self.hosts().into_iter().map(|h| self.senders_of(h, None)).collect();
        let values: BTreeSet<usize> = counts.iter().copied().collect();
        values
            .into_iter()
            .map(|v| (v, counts.iter().filter(|&&c| c >= v).count() as f64 / counts.len() as f64))
            .collect()
    }
}

pub fn hour_of(r: &RecordRow) -> u64 {
    r.ts.as_nanos() / 3_600_000_000_000
}

/// Mean and population deviation, summing in ascending order.
pub fn mean_std(mut v: Vec<f64>) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}
