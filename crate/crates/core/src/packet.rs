//! Packet records: Ethernet/IPv4 parsing and a small frame builder.
//!
//! A [`PacketRecord`] always carries the raw frame alongside the decoded
//! header fields. Components that rewrite packets (the anonymizer, the
//! responder) edit the raw bytes and the fields together, so the two views
//! never drift apart.

use std::net::Ipv4Addr;

use byteorder::{BigEndian, ByteOrder};

use crate::time::SimTime;

pub const ETH_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const UDP_HEADER_LEN: usize = 8;
pub const ICMP_HEADER_LEN: usize = 8;
/// Bytes kept past the IP header for protocols we do not decode.
pub const OPAQUE_L4_LEN: usize = 8;

const SRC_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
const DST_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];

/// Transport protocol, by IP protocol number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proto {
    Icmp,
    Tcp,
    Udp,
    Other(u8),
}

impl Proto {
    pub fn number(self) -> u8 {
        match self {
            Proto::Icmp => 1,
            Proto::Tcp => 6,
            Proto::Udp => 17,
            Proto::Other(n) => n,
        }
    }

    pub fn name(self) -> String {
        match self {
            Proto::Icmp => "icmp".into(),
            Proto::Tcp => "tcp".into(),
            Proto::Udp => "udp".into(),
            Proto::Other(n) => n.to_string(),
        }
    }

    pub fn parse_name(s: &str) -> Option<Proto> {
        match s.to_ascii_lowercase().as_str() {
            "icmp" => Some(Proto::Icmp),
            "tcp" => Some(Proto::Tcp),
            "udp" => Some(Proto::Udp),
            other => other.parse::<u8>().ok().map(Proto::from),
        }
    }
}

impl From<u8> for Proto {
    fn from(n: u8) -> Self {
        match n {
            1 => Proto::Icmp,
            6 => Proto::Tcp,
            17 => Proto::Udp,
            n => Proto::Other(n),
        }
    }
}

bitflags::bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
    }
}

impl TcpFlags {
    /// Compact letter form, e.g. `SA` for SYN+ACK. Empty flags render as `-`.
    pub fn letters(self) -> String {
        const ORDER: [(TcpFlags, char); 6] = [
            (TcpFlags::SYN, 'S'),
            (TcpFlags::ACK, 'A'),
            (TcpFlags::FIN, 'F'),
            (TcpFlags::RST, 'R'),
            (TcpFlags::PSH, 'P'),
            (TcpFlags::URG, 'U'),
        ];
        let s: String = ORDER.iter().filter(|(f, _)| self.contains(*f)).map(|(_, c)| *c).collect();
        if s.is_empty() {
            "-".into()
        } else {
            s
        }
    }

    /// Inverse of [`TcpFlags::letters`]; unknown letters are ignored.
    pub fn from_letters(s: &str) -> TcpFlags {
        s.chars().fold(TcpFlags::empty(), |acc, c| {
            acc | match c {
                'S' => TcpFlags::SYN,
                'A' => TcpFlags::ACK,
                'F' => TcpFlags::FIN,
                'R' => TcpFlags::RST,
                'P' => TcpFlags::PSH,
                'U' => TcpFlags::URG,
                _ => TcpFlags::empty(),
            }
        })
    }
}

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_DEST_UNREACHABLE: u8 = 3;
pub const ICMP_ECHO_REQUEST: u8 = 8;
pub const ICMP_TIME_EXCEEDED: u8 = 11;
pub const ICMP_PARAMETER_PROBLEM: u8 = 12;

/// ICMP types that report an error about another packet.
pub fn is_icmp_error_type(t: u8) -> bool {
    matches!(t, ICMP_DEST_UNREACHABLE | ICMP_TIME_EXCEEDED | ICMP_PARAMETER_PROBLEM)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("frame too short ({0} bytes)")]
    TooShort(usize),
    #[error("not an IPv4 frame (ethertype {0:#06x})")]
    NotIpv4(u16),
    #[error("bad IPv4 header")]
    BadIpHeader,
    #[error("truncated {0} header")]
    TruncatedL4(&'static str),
}

/// One captured packet.
///
/// Ports are zero unless the protocol is TCP or UDP, except for ICMP echo
/// request/reply where both ports carry the ICMP identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts: SimTime,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub icmp_type: u8,
    pub icmp_code: u8,
    /// L2 + L3 + L4 header bytes.
    pub header_len: u32,
    pub payload_len: u32,
    pub raw: Vec<u8>,
}

impl PacketRecord {
    /// Decodes an Ethernet frame carrying IPv4.
    pub fn parse(ts: SimTime, raw: Vec<u8>) -> Result<Self, ParseError> {
        if raw.len() < ETH_HEADER_LEN + 20 {
            return Err(ParseError::TooShort(raw.len()));
        }
        let ethertype = BigEndian::read_u16(&raw[12..14]);
        if ethertype != ETHERTYPE_IPV4 {
            return Err(ParseError::NotIpv4(ethertype));
        }
        let ip = &raw[ETH_HEADER_LEN..];
        if ip[0] >> 4 != 4 {
            return Err(ParseError::BadIpHeader);
        }
        let ihl = usize::from(ip[0] & 0x0f) * 4;
        if ihl < 20 || ihl > ip.len() {
            return Err(ParseError::BadIpHeader);
        }
        let proto = Proto::from(ip[9]);
        let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
        let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
        let frag_offset = BigEndian::read_u16(&ip[6..8]) & 0x1fff;
        let l4_start = ETH_HEADER_LEN + ihl;
        let l4 = &raw[l4_start..];

        let mut rec = PacketRecord {
            ts,
            src_ip,
            dst_ip,
            proto,
            src_port: 0,
            dst_port: 0,
            tcp_flags: TcpFlags::empty(),
            tcp_seq: 0,
            tcp_ack: 0,
            icmp_type: 0,
            icmp_code: 0,
            header_len: l4_start as u32,
            payload_len: 0,
            raw: Vec::new(),
        };

        let l4_len = if frag_offset != 0 {
            // Non-first fragment: no transport header to decode.
            0
        } else {
            match proto {
                Proto::Tcp => {
                    if l4.len() < 20 {
                        return Err(ParseError::TruncatedL4("tcp"));
                    }
                    let doff = usize::from(l4[12] >> 4) * 4;
                    if doff < 20 || doff > l4.len() {
                        return Err(ParseError::TruncatedL4("tcp"));
                    }
                    rec.src_port = BigEndian::read_u16(&l4[0..2]);
                    rec.dst_port = BigEndian::read_u16(&l4[2..4]);
                    rec.tcp_seq = BigEndian::read_u32(&l4[4..8]);
                    rec.tcp_ack = BigEndian::read_u32(&l4[8..12]);
                    rec.tcp_flags = TcpFlags::from_bits_truncate(l4[13]);
                    doff
                }
                Proto::Udp => {
                    if l4.len() < UDP_HEADER_LEN {
                        return Err(ParseError::TruncatedL4("udp"));
                    }
                    rec.src_port = BigEndian::read_u16(&l4[0..2]);
                    rec.dst_port = BigEndian::read_u16(&l4[2..4]);
                    UDP_HEADER_LEN
                }
                Proto::Icmp => {
                    if l4.len() < ICMP_HEADER_LEN {
                        return Err(ParseError::TruncatedL4("icmp"));
                    }
                    rec.icmp_type = l4[0];
                    rec.icmp_code = l4[1];
                    if matches!(rec.icmp_type, ICMP_ECHO_REQUEST | ICMP_ECHO_REPLY) {
                        let id = BigEndian::read_u16(&l4[4..6]);
                        rec.src_port = id;
                        rec.dst_port = id;
                    }
                    ICMP_HEADER_LEN
                }
                Proto::Other(_) => OPAQUE_L4_LEN.min(l4.len()),
            }
        };
        rec.header_len = (l4_start + l4_len) as u32;
        rec.payload_len = (raw.len() - l4_start - l4_len) as u32;
        rec.raw = raw;
        Ok(rec)
    }

    pub fn is_icmp_error(&self) -> bool {
        self.proto == Proto::Icmp && is_icmp_error_type(self.icmp_type)
    }

    /// IP header length as stored in the raw frame.
    pub fn ip_header_len(&self) -> Option<usize> {
        let b = *self.raw.get(ETH_HEADER_LEN)?;
        Some(usize::from(b & 0x0f) * 4)
    }

    pub fn payload(&self) -> &[u8] {
        let start = (self.header_len as usize).min(self.raw.len());
        &self.raw[start..]
    }

    /// Rewrites the IPv4 source and destination in both the decoded fields and
    /// the raw frame, refreshing the IP header checksum.
    pub fn rewrite_addresses(&mut self, src: Ipv4Addr, dst: Ipv4Addr) {
        self.src_ip = src;
        self.dst_ip = dst;
        let Some(ihl) = self.ip_header_len() else { return };
        let end = ETH_HEADER_LEN + ihl;
        if self.raw.len() < end || ihl < 20 {
            return;
        }
        let ip = &mut self.raw[ETH_HEADER_LEN..end];
        ip[12..16].copy_from_slice(&src.octets());
        ip[16..20].copy_from_slice(&dst.octets());
        ip[10] = 0;
        ip[11] = 0;
        let sum = internet_checksum(ip, 0);
        BigEndian::write_u16(&mut ip[10..12], sum);
    }

    /// The same packet seen travelling in the opposite direction: addresses,
    /// ports and timestamp kept, endpoints swapped. Used by tests and the
    /// oracle; the raw frame is rebuilt to match.
    pub fn reversed(&self) -> PacketRecord {
        let mut r = self.clone();
        r.rewrite_addresses(self.dst_ip, self.src_ip);
        r.src_port = self.dst_port;
        r.dst_port = self.src_port;
        if matches!(self.proto, Proto::Tcp | Proto::Udp) {
            let l4 = ETH_HEADER_LEN + self.ip_header_len().unwrap_or(20);
            if r.raw.len() >= l4 + 4 {
                BigEndian::write_u16(&mut r.raw[l4..l4 + 2], r.src_port);
                BigEndian::write_u16(&mut r.raw[l4 + 2..l4 + 4], r.dst_port);
            }
        }
        r
    }
}

/// RFC 1071 ones'-complement checksum, seeded with a partial sum.
pub fn internet_checksum(data: &[u8], initial: u32) -> u16 {
    let mut sum = initial;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(BigEndian::read_u16(c));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(*last) << 8;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, len: usize) -> u32 {
    let s = src.octets();
    let d = dst.octets();
    u32::from(u16::from_be_bytes([s[0], s[1]]))
        + u32::from(u16::from_be_bytes([s[2], s[3]]))
        + u32::from(u16::from_be_bytes([d[0], d[1]]))
        + u32::from(u16::from_be_bytes([d[2], d[3]]))
        + u32::from(proto)
        + len as u32
}

#[derive(Debug, Clone)]
enum L4Spec {
    Tcp { flags: TcpFlags, seq: u32, ack: u32, options_len: usize },
    Udp,
    Icmp { icmp_type: u8, code: u8, rest: [u8; 4] },
    Other(u8),
}

/// Builds Ethernet/IPv4 frames for synthetic traces and responder replies.
#[derive(Debug, Clone)]
pub struct PacketBuilder {
    ts: SimTime,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    src_port: u16,
    dst_port: u16,
    l4: L4Spec,
    payload: Vec<u8>,
    ttl: u8,
}

impl PacketBuilder {
    fn base(src: Ipv4Addr, dst: Ipv4Addr, l4: L4Spec) -> Self {
        Self { ts: SimTime::ZERO, src, dst, src_port: 0, dst_port: 0, l4, payload: Vec::new(), ttl: 64 }
    }

    pub fn tcp(src: Ipv4Addr, src_port: u16, dst: Ipv4Addr, dst_port: u16, flags: TcpFlags) -> Self {
        let mut b = Self::base(src, dst, L4Spec::Tcp { flags, seq: 0, ack: 0, options_len: 0 });
        b.src_port = src_port;
        b.dst_port = dst_port;
        b
    }

    pub fn udp(src: Ipv4Addr, src_port: u16, dst: Ipv4Addr, dst_port: u16) -> Self {
        let mut b = Self::base(src, dst, L4Spec::Udp);
        b.src_port = src_port;
        b.dst_port = dst_port;
        b
    }

    pub fn icmp_echo(src: Ipv4Addr, dst: Ipv4Addr, request: bool, id: u16, seq: u16) -> Self {
        let t = if request { ICMP_ECHO_REQUEST } else { ICMP_ECHO_REPLY };
        let mut rest = [0u8; 4];
        rest[..2].copy_from_slice(&id.to_be_bytes());
        rest[2..].copy_from_slice(&seq.to_be_bytes());
        Self::base(src, dst, L4Spec::Icmp { icmp_type: t, code: 0, rest })
    }

    /// ICMP error quoting the IP header and first 8 transport bytes of `offending`.
    pub fn icmp_error(src: Ipv4Addr, icmp_type: u8, code: u8, offending: &PacketRecord) -> Self {
        let ip_start = ETH_HEADER_LEN;
        let ihl = offending.ip_header_len().unwrap_or(20);
        let quote_end = (ip_start + ihl + 8).min(offending.raw.len());
        let quote = offending.raw[ip_start.min(quote_end)..quote_end].to_vec();
        Self::base(src, offending.src_ip, L4Spec::Icmp { icmp_type, code, rest: [0; 4] }).payload(quote)
    }

    pub fn icmp(src: Ipv4Addr, dst: Ipv4Addr, icmp_type: u8, code: u8) -> Self {
        Self::base(src, dst, L4Spec::Icmp { icmp_type, code, rest: [0; 4] })
    }

    pub fn other(src: Ipv4Addr, dst: Ipv4Addr, proto: u8) -> Self {
        Self::base(src, dst, L4Spec::Other(proto))
    }

    pub fn at(mut self, ts: SimTime) -> Self {
        self.ts = ts;
        self
    }

    pub fn seq(mut self, v: u32) -> Self {
        if let L4Spec::Tcp { seq, .. } = &mut self.l4 {
            *seq = v;
        }
        self
    }

    pub fn ack(mut self, v: u32) -> Self {
        if let L4Spec::Tcp { ack, .. } = &mut self.l4 {
            *ack = v;
        }
        self
    }

    /// TCP option bytes (NOP padded); rounded up to a multiple of 4, max 40.
    pub fn tcp_options(mut self, len: usize) -> Self {
        if let L4Spec::Tcp { options_len, .. } = &mut self.l4 {
            *options_len = len.div_ceil(4).min(10) * 4;
        }
        self
    }

    pub fn payload(mut self, data: impl Into<Vec<u8>>) -> Self {
        self.payload = data.into();
        self
    }

    pub fn payload_len(self, n: usize) -> Self {
        let data: Vec<u8> = (0..n).map(|i| (i % 251) as u8).collect();
        self.payload(data)
    }

    pub fn build(self) -> PacketRecord {
        let l4_header = match &self.l4 {
            L4Spec::Tcp { options_len, .. } => 20 + options_len,
            L4Spec::Udp => UDP_HEADER_LEN,
            L4Spec::Icmp { .. } => ICMP_HEADER_LEN,
            L4Spec::Other(_) => 0,
        };
        let proto = match self.l4 {
            L4Spec::Tcp { .. } => 6,
            L4Spec::Udp => 17,
            L4Spec::Icmp { .. } => 1,
            L4Spec::Other(p) => p,
        };
        let ip_total = 20 + l4_header + self.payload.len();
        let mut raw = Vec::with_capacity(ETH_HEADER_LEN + ip_total);
        raw.extend_from_slice(&DST_MAC);
        raw.extend_from_slice(&SRC_MAC);
        raw.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

        let mut ip = [0u8; 20];
        ip[0] = 0x45;
        BigEndian::write_u16(&mut ip[2..4], ip_total as u16);
        ip[8] = self.ttl;
        ip[9] = proto;
        ip[12..16].copy_from_slice(&self.src.octets());
        ip[16..20].copy_from_slice(&self.dst.octets());
        let csum = internet_checksum(&ip, 0);
        BigEndian::write_u16(&mut ip[10..12], csum);
        raw.extend_from_slice(&ip);

        let l4_start = raw.len();
        match &self.l4 {
            L4Spec::Tcp { flags, seq, ack, options_len } => {
                let mut h = vec![0u8; 20 + options_len];
                BigEndian::write_u16(&mut h[0..2], self.src_port);
                BigEndian::write_u16(&mut h[2..4], self.dst_port);
                BigEndian::write_u32(&mut h[4..8], *seq);
                BigEndian::write_u32(&mut h[8..12], *ack);
                h[12] = (((20 + options_len) / 4) as u8) << 4;
                h[13] = flags.bits();
                BigEndian::write_u16(&mut h[14..16], 65535);
                for b in &mut h[20..] {
                    *b = 1; // NOP
                }
                raw.extend_from_slice(&h);
            }
            L4Spec::Udp => {
                let mut h = [0u8; 8];
                BigEndian::write_u16(&mut h[0..2], self.src_port);
                BigEndian::write_u16(&mut h[2..4], self.dst_port);
                BigEndian::write_u16(&mut h[4..6], (8 + self.payload.len()) as u16);
                raw.extend_from_slice(&h);
            }
            L4Spec::Icmp { icmp_type, code, rest } => {
                raw.extend_from_slice(&[*icmp_type, *code, 0, 0]);
                raw.extend_from_slice(rest);
            }
            L4Spec::Other(_) => {}
        }
        raw.extend_from_slice(&self.payload);

        // Transport checksums.
        match self.l4 {
            L4Spec::Tcp { .. } | L4Spec::Udp => {
                let seg_len = raw.len() - l4_start;
                let seed = pseudo_header_sum(self.src, self.dst, proto, seg_len);
                let off = if proto == 6 { 16 } else { 6 };
                let mut c = internet_checksum(&raw[l4_start..], seed);
                if proto == 17 && c == 0 {
                    c = 0xffff;
                }
                BigEndian::write_u16(&mut raw[l4_start + off..l4_start + off + 2], c);
            }
            L4Spec::Icmp { .. } => {
                let c = internet_checksum(&raw[l4_start..], 0);
                BigEndian::write_u16(&mut raw[l4_start + 2..l4_start + 4], c);
            }
            L4Spec::Other(_) => {}
        }

        PacketRecord::parse(self.ts, raw).expect("builder produces well-formed frames")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn tcp_roundtrip_fields() {
        let p = PacketBuilder::tcp(ip("10.0.0.5"), 1234, ip("8.8.8.8"), 80, TcpFlags::SYN)
            .seq(77)
            .tcp_options(12)
            .payload_len(100)
            .at(SimTime::from_millis(5))
            .build();
        assert_eq!(p.proto, Proto::Tcp);
        assert_eq!((p.src_port, p.dst_port), (1234, 80));
        assert_eq!(p.tcp_seq, 77);
        assert_eq!(p.tcp_flags, TcpFlags::SYN);
        assert_eq!(p.header_len as usize, 14 + 20 + 32);
        assert_eq!(p.payload_len, 100);
        assert_eq!(p.header_len as usize + p.payload_len as usize, p.raw.len());
        // IP checksum verifies to zero.
        assert_eq!(internet_checksum(&p.raw[14..34], 0), 0);
    }

    #[test]
    fn icmp_echo_uses_identifier_as_ports() {
        let p = PacketBuilder::icmp_echo(ip("1.1.1.1"), ip("2.2.2.2"), true, 7, 1).build();
        assert_eq!((p.src_port, p.dst_port), (7, 7));
        assert_eq!(p.icmp_type, ICMP_ECHO_REQUEST);
        let e = PacketBuilder::icmp(ip("1.1.1.1"), ip("2.2.2.2"), 13, 0).build();
        assert_eq!((e.src_port, e.dst_port), (0, 0));
    }

    #[test]
    fn icmp_error_quotes_offender() {
        let req = PacketBuilder::udp(ip("10.0.0.1"), 5000, ip("9.9.9.9"), 123).payload_len(48).build();
        let err = PacketBuilder::icmp_error(ip("9.9.9.9"), 3, 3, &req).build();
        assert!(err.is_icmp_error());
        assert_eq!(err.dst_ip, req.src_ip);
        assert_eq!(err.payload_len, 28);
    }

    #[test]
    fn unknown_protocol_keeps_eight_opaque_bytes_as_header() {
        let p = PacketBuilder::other(ip("1.1.1.1"), ip("2.2.2.2"), 47).payload_len(64).build();
        assert_eq!(p.proto, Proto::Other(47));
        assert_eq!(p.header_len as usize, 14 + 20 + 8);
        assert_eq!(p.payload_len, 56);
    }

    #[test]
    fn rejects_non_ipv4() {
        let mut raw = vec![0u8; 60];
        raw[12] = 0x86;
        raw[13] = 0xdd;
        assert_eq!(PacketRecord::parse(SimTime::ZERO, raw), Err(ParseError::NotIpv4(0x86dd)));
        assert!(matches!(PacketRecord::parse(SimTime::ZERO, vec![0; 10]), Err(ParseError::TooShort(10))));
    }

    #[test]
    fn rewrite_keeps_checksum_valid() {
        let mut p = PacketBuilder::udp(ip("10.0.0.1"), 1, ip("8.8.8.8"), 53).build();
        p.rewrite_addresses(ip("10.9.9.9"), ip("8.8.4.4"));
        let back = PacketRecord::parse(p.ts, p.raw.clone()).unwrap();
        assert_eq!(back.src_ip, ip("10.9.9.9"));
        assert_eq!(back.dst_ip, ip("8.8.4.4"));
        assert_eq!(internet_checksum(&p.raw[14..34], 0), 0);
    }

    #[test]
    fn flag_letters() {
        assert_eq!((TcpFlags::SYN | TcpFlags::ACK).letters(), "SA");
        assert_eq!(TcpFlags::empty().letters(), "-");
    }
}
