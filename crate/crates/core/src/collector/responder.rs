//! TCP responder for impersonated endpoints.
//!
//! Accepts the handshake, captures the first application segment and resets
//! the connection.
//!
//! | state \ segment | SYN               | ACK         | DATA                  | FIN                   | RST            |
//! |-----------------|-------------------|-------------|-----------------------|-----------------------|----------------|
//! | none            | SYN-ACK, SynRcvd  | RST         | RST                   | RST                   | -              |
//! | SynRcvd         | SYN-ACK           | Established | capture, RST, none    | RST, none             | none           |
//! | Established     | close, RST, none  | -           | capture, RST, none    | close, RST, none      | close, none    |
//!
//! "capture" records the segment payload; "close" records an empty capture.

use std::collections::{BTreeSet, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::config::ServiceEndpoint;
use crate::flow::{dst_endpoint, src_endpoint, Endpoint};
use crate::packet::{PacketBuilder, PacketRecord, Proto, TcpFlags};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    SynRcvd { isn: u32 },
    Established { isn: u32 },
}

/// First application message of one connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub ts: SimTime,
    pub remote: Endpoint,
    pub local: Endpoint,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResponderStats {
    pub segments: u64,
    pub syn_acks: u64,
    pub resets: u64,
    pub transcripts: u64,
    pub table_full: u64,
    pub ignored: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Syn,
    Ack,
    Data,
    Fin,
    Rst,
}

impl Segment {
    pub fn of(pkt: &PacketRecord) -> Segment {
        let f = pkt.tcp_flags;
        if f.contains(TcpFlags::RST) {
            Segment::Rst
        } else if f.contains(TcpFlags::SYN) {
            Segment::Syn
        } else if pkt.payload_len > 0 {
            Segment::Data
        } else if f.contains(TcpFlags::FIN) {
            Segment::Fin
        } else {
            Segment::Ack
        }
    }
}

pub struct Responder {
    endpoints: BTreeSet<ServiceEndpoint>,
    conns: HashMap<(Endpoint, Endpoint), ConnState>,
    capacity: usize,
    seed: u64,
    transcripts: Vec<Transcript>,
    stats: ResponderStats,
}

impl Responder {
    pub fn new(endpoints: BTreeSet<ServiceEndpoint>, capacity: usize, seed: u64) -> Self {
        Self {
            endpoints,
            conns: HashMap::new(),
            capacity,
            seed,
            transcripts: Vec::new(),
            stats: ResponderStats::default(),
        }
    }

    fn isn(&self, remote: Endpoint, local: Endpoint) -> u32 {
        let mut h = DefaultHasher::new();
        (self.seed, remote, local).hash(&mut h);
        h.finish() as u32
    }

    pub fn state(&self, remote: Endpoint, local: Endpoint) -> Option<ConnState> {
        self.conns.get(&(remote, local)).copied()
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }

    /// Advances the connection `pkt` belongs to and returns the reply, if any.
    pub fn responder_step(&mut self, pkt: &PacketRecord, now: SimTime) -> Option<PacketRecord> {
        let local = dst_endpoint(pkt);
        let remote = src_endpoint(pkt);
        let served = pkt.proto == Proto::Tcp
            && self.endpoints.contains(&ServiceEndpoint { ip: local.ip, port: local.port, proto: 6 });
        if !served {
            self.stats.ignored += 1;
            return None;
        }
        self.stats.segments += 1;
        let key = (remote, local);
        let seg = Segment::of(pkt);
        let seg_len = pkt.payload_len
            + u32::from(pkt.tcp_flags.contains(TcpFlags::SYN))
            + u32::from(pkt.tcp_flags.contains(TcpFlags::FIN));
        let peer_next = pkt.tcp_seq.wrapping_add(seg_len);
        let reply = |flags: TcpFlags, seq: u32, ack: u32| {
            PacketBuilder::tcp(local.ip, local.port, remote.ip, remote.port, flags).seq(seq).ack(ack).at(now).build()
        };
        match (self.conns.get(&key).copied(), seg) {
            (_, Segment::Rst) => {
                if let Some(ConnState::Established { .. }) = self.conns.remove(&key) {
                    self.capture(now, remote, local, Vec::new());
                }
                None
            }
            (None, Segment::Syn) | (Some(ConnState::SynRcvd { .. }), Segment::Syn) => {
                if !self.conns.contains_key(&key) && self.conns.len() >= self.capacity {
                    self.stats.table_full += 1;
                    return None;
                }
                let isn = self.isn(remote, local);
                self.conns.insert(key, ConnState::SynRcvd { isn });
                self.stats.syn_acks += 1;
                Some(reply(TcpFlags::SYN | TcpFlags::ACK, isn, peer_next))
            }
            (None, _) => {
                self.stats.resets += 1;
                Some(if pkt.tcp_flags.contains(TcpFlags::ACK) {
                    reply(TcpFlags::RST, pkt.tcp_ack, 0)
                } else {
                    reply(TcpFlags::RST | TcpFlags::ACK, 0, peer_next)
                })
            }
            (Some(ConnState::SynRcvd { isn }), Segment::Ack) => {
                self.conns.insert(key, ConnState::Established { isn });
                None
            }
            (Some(ConnState::Established { .. }), Segment::Ack) => None,
            (Some(ConnState::SynRcvd { isn } | ConnState::Established { isn }), Segment::Data) => {
                self.conns.remove(&key);
                self.capture(now, remote, local, pkt.payload().to_vec());
                self.stats.resets += 1;
                Some(reply(TcpFlags::RST | TcpFlags::ACK, isn.wrapping_add(1), peer_next))
            }
            (
                Some(state @ (ConnState::SynRcvd { isn } | ConnState::Established { isn })),
                Segment::Fin | Segment::Syn,
            ) => {
                self.conns.remove(&key);
                if matches!(state, ConnState::Established { .. }) {
                    self.capture(now, remote, local, Vec::new());
                }
                self.stats.resets += 1;
                Some(reply(TcpFlags::RST | TcpFlags::ACK, isn.wrapping_add(1), peer_next))
            }
        }
    }

    fn capture(&mut self, ts: SimTime, remote: Endpoint, local: Endpoint, payload: Vec<u8>) {
        self.stats.transcripts += 1;
        self.transcripts.push(Transcript { ts, remote, local, payload });
    }

    pub fn take_transcripts(&mut self) -> Vec<Transcript> {
        std::mem::take(&mut self.transcripts)
    }

    pub fn stats(&self) -> &ResponderStats {
        &self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn responder() -> Responder {
        Responder::new([ServiceEndpoint { ip: ip("10.0.0.200"), port: 80, proto: 6 }].into(), 16, 1)
    }

    fn seg(flags: TcpFlags, seq: u32, ack: u32, payload: usize) -> PacketRecord {
        PacketBuilder::tcp(ip("5.5.5.5"), 4000, ip("10.0.0.200"), 80, flags)
            .seq(seq)
            .ack(ack)
            .payload_len(payload)
            .build()
    }

    #[test]
    fn handshake_arithmetic() {
        let mut r = responder();
        let sa = r.responder_step(&seg(TcpFlags::SYN, 1000, 0, 0), SimTime::ZERO).unwrap();
        assert_eq!(sa.tcp_flags, TcpFlags::SYN | TcpFlags::ACK);
        assert_eq!(sa.tcp_ack, 1001);
        assert_eq!((sa.src_ip, sa.src_port, sa.dst_ip, sa.dst_port), (ip("10.0.0.200"), 80, ip("5.5.5.5"), 4000));
        // Deterministic per seed.
        let again = responder().responder_step(&seg(TcpFlags::SYN, 1000, 0, 0), SimTime::ZERO).unwrap();
        assert_eq!(again.tcp_seq, sa.tcp_seq);
    }

    #[test]
    fn capture_then_reset() {
        let mut r = responder();
        let sa = r.responder_step(&seg(TcpFlags::SYN, 1000, 0, 0), SimTime::ZERO).unwrap();
        assert!(r.responder_step(&seg(TcpFlags::ACK, 1001, sa.tcp_seq + 1, 0), SimTime::ZERO).is_none());
        let rst =
            r.responder_step(&seg(TcpFlags::ACK | TcpFlags::PSH, 1001, sa.tcp_seq + 1, 40), SimTime::ZERO).unwrap();
        assert!(rst.tcp_flags.contains(TcpFlags::RST));
        assert_eq!(rst.tcp_ack, 1041);
        let t = r.take_transcripts();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].payload.len(), 40);
        assert_eq!(r.open_connections(), 0);
    }

    #[test]
    fn bare_ack_to_unknown_connection_is_reset() {
        let mut r = responder();
        let rst = r.responder_step(&seg(TcpFlags::ACK, 5, 77, 0), SimTime::ZERO).unwrap();
        assert_eq!(rst.tcp_flags, TcpFlags::RST);
        assert_eq!(rst.tcp_seq, 77);
    }

    #[test]
    fn foreign_endpoints_are_ignored() {
        let mut r = responder();
        let p = PacketBuilder::tcp(ip("5.5.5.5"), 1, ip("10.0.0.201"), 80, TcpFlags::SYN).build();
        assert!(r.responder_step(&p, SimTime::ZERO).is_none());
        let u = PacketBuilder::udp(ip("5.5.5.5"), 1, ip("10.0.0.200"), 80).build();
        assert!(r.responder_step(&u, SimTime::ZERO).is_none());
    }

    #[test]
    fn full_table_ignores_new_syn() {
        let mut r = Responder::new([ServiceEndpoint { ip: ip("10.0.0.200"), port: 80, proto: 6 }].into(), 1, 1);
        assert!(r.responder_step(&seg(TcpFlags::SYN, 1, 0, 0), SimTime::ZERO).is_some());
        let other = PacketBuilder::tcp(ip("6.6.6.6"), 1, ip("10.0.0.200"), 80, TcpFlags::SYN).build();
        assert!(r.responder_step(&other, SimTime::ZERO).is_none());
        assert_eq!(r.stats().table_full, 1);
    }
}
