//! Data minimisation on the mirror path: internal-address obfuscation and
//! transport-payload truncation.
//!
//! Obfuscation XORs the address with the deployment key salted by the
//! address's own last octet. The salt is the last octet replicated into the
//! three high-order bytes, so the low byte of the output is `last ^ key_lo`
//! and the salt can be recovered from the output given the key.

use std::net::Ipv4Addr;

use crate::config::{AnonKey, NetworkConfig};
use crate::flow::{dst_endpoint, src_endpoint};
use crate::packet::{PacketRecord, Proto, ETH_HEADER_LEN, ICMP_HEADER_LEN, OPAQUE_L4_LEN, UDP_HEADER_LEN};

fn salted_key(key: AnonKey, last_octet: u8) -> u32 {
    let b = u32::from(last_octet);
    key.0 ^ ((b << 24) | (b << 16) | (b << 8))
}

pub fn obfuscate_ip(ip: Ipv4Addr, key: AnonKey) -> Ipv4Addr {
    let v = u32::from(ip);
    Ipv4Addr::from(v ^ salted_key(key, v as u8))
}

pub fn deobfuscate_ip(ip: Ipv4Addr, key: AnonKey) -> Ipv4Addr {
    let v = u32::from(ip);
    let last = (v as u8) ^ (key.0 as u8);
    Ipv4Addr::from(v ^ salted_key(key, last))
}

/// Raised when header lengths in the frame are inconsistent; carries the
/// packet cut to the fixed fallback length instead.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed header, truncated to fallback length {}", .fallback.raw.len())]
pub struct MalformedHeader {
    pub fallback: PacketRecord,
}

/// Fallback cut when headers cannot be trusted: Ethernet + minimal IP + 8.
pub const FALLBACK_LEN: usize = ETH_HEADER_LEN + 20 + OPAQUE_L4_LEN;

fn cut(pkt: &PacketRecord, keep: usize) -> PacketRecord {
    let keep = keep.min(pkt.raw.len());
    let mut out = pkt.clone();
    out.raw.truncate(keep);
    out.header_len = keep as u32;
    out.payload_len = 0;
    out
}

/// Keeps the Ethernet, IP and transport headers and drops everything after.
///
/// Lengths come from the frame itself: IHL for IPv4, data offset for TCP,
/// fixed 8 bytes for UDP and ICMP, and 8 opaque bytes for anything else.
pub fn truncate(pkt: &PacketRecord) -> Result<PacketRecord, MalformedHeader> {
    let raw = &pkt.raw;
    let fail = |keep: usize| MalformedHeader { fallback: cut(pkt, keep) };
    if raw.len() < ETH_HEADER_LEN + 20 {
        return Err(fail(FALLBACK_LEN));
    }
    let ihl = usize::from(raw[ETH_HEADER_LEN] & 0x0f) * 4;
    let l4 = ETH_HEADER_LEN + ihl;
    if ihl < 20 || l4 > raw.len() {
        return Err(fail(FALLBACK_LEN));
    }
    let fallback = l4 + OPAQUE_L4_LEN;
    let l4_len = match Proto::from(raw[ETH_HEADER_LEN + 9]) {
        Proto::Tcp => {
            if raw.len() < l4 + 20 {
                return Err(fail(fallback));
            }
            let doff = usize::from(raw[l4 + 12] >> 4) * 4;
            if doff < 20 || l4 + doff > raw.len() {
                return Err(fail(fallback));
            }
            doff
        }
        Proto::Udp | Proto::Icmp => {
            let n = if raw[ETH_HEADER_LEN + 9] == 17 { UDP_HEADER_LEN } else { ICMP_HEADER_LEN };
            if raw.len() < l4 + n {
                return Err(fail(fallback));
            }
            n
        }
        Proto::Other(_) => OPAQUE_L4_LEN,
    };
    Ok(cut(pkt, l4 + l4_len))
}

/// Metadata the switch attaches to each mirrored copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MirrorMeta {
    pub src_internal: bool,
    pub dst_internal: bool,
    /// The packet touches an impersonated endpoint and bypassed both transforms.
    pub impersonated: bool,
}

/// A packet as delivered on the mirror path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirroredPacket {
    pub pkt: PacketRecord,
    pub meta: MirrorMeta,
}

impl MirroredPacket {
    /// Real source address, undoing the obfuscation where it was applied.
    pub fn real_src(&self, key: AnonKey) -> Ipv4Addr {
        if self.meta.src_internal && !self.meta.impersonated {
            deobfuscate_ip(self.pkt.src_ip, key)
        } else {
            self.pkt.src_ip
        }
    }

    pub fn real_dst(&self, key: AnonKey) -> Ipv4Addr {
        if self.meta.dst_internal && !self.meta.impersonated {
            deobfuscate_ip(self.pkt.dst_ip, key)
        } else {
            self.pkt.dst_ip
        }
    }

    /// True when the copy went through both transforms.
    pub fn is_anonymized(&self) -> bool {
        !self.meta.impersonated && (self.meta.src_internal || self.meta.dst_internal)
    }
}

/// Applies the mirror-path transforms. The second value reports whether the
/// truncation fell back because of a malformed header.
pub fn anonymize_for_mirror(pkt: &PacketRecord, cfg: &NetworkConfig) -> (MirroredPacket, bool) {
    let proto = pkt.proto.number();
    let meta = MirrorMeta {
        src_internal: cfg.is_internal(pkt.src_ip),
        dst_internal: cfg.is_internal(pkt.dst_ip),
        impersonated: cfg.is_impersonated(dst_endpoint(pkt), proto) || cfg.is_impersonated(src_endpoint(pkt), proto),
    };
    if meta.impersonated {
        return (MirroredPacket { pkt: pkt.clone(), meta }, false);
    }
    let (mut out, malformed) = match truncate(pkt) {
        Ok(p) => (p, false),
        Err(e) => (e.fallback, true),
    };
    let key = cfg.anonymization_key;
    let src = if meta.src_internal { obfuscate_ip(pkt.src_ip, key) } else { pkt.src_ip };
    let dst = if meta.dst_internal { obfuscate_ip(pkt.dst_ip, key) } else { pkt.dst_ip };
    if meta.src_internal || meta.dst_internal {
        out.rewrite_addresses(src, dst);
    }
    (MirroredPacket { pkt: out, meta }, malformed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ServiceEndpoint;
    use crate::packet::{PacketBuilder, TcpFlags};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn zero_key_zero_last_byte_is_identity() {
        assert_eq!(obfuscate_ip(ip("10.1.2.0"), AnonKey(0)), ip("10.1.2.0"));
        // With key 0 only the salted bytes change.
        assert_eq!(obfuscate_ip(ip("10.1.2.3"), AnonKey(0)), ip("9.2.1.3"));
    }

    #[test]
    fn golden_vector() {
        // 10.0.0.77 = 0x0a00004d, salt 0x4d4d4d00, key 0x5eed1234.
        let out = obfuscate_ip(ip("10.0.0.77"), AnonKey(0x5eed_1234));
        assert_eq!(u32::from(out), 0x0a00_004d ^ 0x4d4d_4d00 ^ 0x5eed_1234);
        assert_eq!(out, ip("25.160.95.121"));
        assert_eq!(deobfuscate_ip(out, AnonKey(0x5eed_1234)), ip("10.0.0.77"));
    }

    #[test]
    fn injective_on_every_last_octet_of_a_slash24() {
        for key in [0u32, 0xdead_beef, 0x0000_00ff, 0x1234_5678] {
            let outs: HashSet<_> =
                (0..=255u8).map(|b| obfuscate_ip(Ipv4Addr::new(192, 168, 7, b), AnonKey(key))).collect();
            assert_eq!(outs.len(), 256);
        }
    }

    proptest! {
        #[test]
        fn roundtrip(addr in any::<u32>(), key in any::<u32>()) {
            let ip = Ipv4Addr::from(addr);
            prop_assert_eq!(deobfuscate_ip(obfuscate_ip(ip, AnonKey(key)), AnonKey(key)), ip);
            prop_assert_eq!(obfuscate_ip(deobfuscate_ip(ip, AnonKey(key)), AnonKey(key)), ip);
        }
    }

    #[test]
    fn tcp_with_options_loses_exactly_the_payload() {
        let p = PacketBuilder::tcp(ip("10.0.0.5"), 1000, ip("1.1.1.1"), 80, TcpFlags::ACK | TcpFlags::PSH)
            .tcp_options(12)
            .payload_len(100)
            .build();
        let t = truncate(&p).unwrap();
        assert_eq!(t.raw.len(), p.raw.len() - 100);
        assert_eq!(t.raw.len(), 14 + 20 + 32);
        assert_eq!(t.payload_len, 0);
        assert_eq!(t.src_port, p.src_port);
    }

    #[test]
    fn udp_keeps_eight_byte_header() {
        let p = PacketBuilder::udp(ip("10.0.0.5"), 1000, ip("1.1.1.1"), 53).payload_len(60).build();
        assert_eq!(truncate(&p).unwrap().raw.len(), 14 + 20 + 8);
    }

    #[test]
    fn unknown_protocol_keeps_ip_plus_eight() {
        let p = PacketBuilder::other(ip("10.0.0.5"), ip("1.1.1.1"), 47).payload_len(200).build();
        assert_eq!(truncate(&p).unwrap().raw.len(), 14 + 20 + 8);
    }

    #[test]
    fn malformed_tcp_offset_falls_back() {
        let mut p = PacketBuilder::tcp(ip("10.0.0.5"), 1, ip("1.1.1.1"), 2, TcpFlags::SYN).payload_len(30).build();
        p.raw[14 + 20 + 12] = 0xf0; // data offset 60 bytes, more than the frame holds
        let err = truncate(&p).unwrap_err();
        assert_eq!(err.fallback.raw.len(), FALLBACK_LEN);
        let mut short = p.clone();
        short.raw.truncate(20);
        assert_eq!(truncate(&short).unwrap_err().fallback.raw.len(), 20);
    }

    #[test]
    fn mirror_transforms_only_internal_addresses() {
        let cfg = NetworkConfig::default();
        let p = PacketBuilder::tcp(ip("10.0.0.5"), 1000, ip("8.8.8.8"), 443, TcpFlags::SYN).payload_len(10).build();
        let (m, malformed) = anonymize_for_mirror(&p, &cfg);
        assert!(!malformed);
        assert_eq!(m.pkt.dst_ip, ip("8.8.8.8"));
        assert_ne!(m.pkt.src_ip, ip("10.0.0.5"));
        assert_eq!(m.real_src(cfg.anonymization_key), ip("10.0.0.5"));
        assert_eq!(m.pkt.payload_len, 0);
        assert!(m.is_anonymized());
        // The raw frame agrees with the decoded fields.
        let reparsed = PacketRecord::parse(m.pkt.ts, m.pkt.raw.clone()).unwrap();
        assert_eq!(reparsed.src_ip, m.pkt.src_ip);
    }

    #[test]
    fn impersonated_endpoints_bypass_transforms() {
        let mut cfg = NetworkConfig::default();
        cfg.impersonation.insert(ServiceEndpoint { ip: ip("10.0.0.200"), port: 80, proto: 6 });
        let p = PacketBuilder::tcp(ip("5.5.5.5"), 999, ip("10.0.0.200"), 80, TcpFlags::ACK).payload_len(40).build();
        let (m, _) = anonymize_for_mirror(&p, &cfg);
        assert_eq!(m.pkt, p);
        assert!(m.meta.impersonated);
        assert!(!m.is_anonymized());
    }
}
