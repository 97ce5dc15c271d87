//! Bidirectional flow keys and response matching.

use std::fmt;
use std::net::Ipv4Addr;

use crate::packet::{PacketRecord, Proto};

/// One side of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Self {
        Self { ip, port }
    }

    /// The endpoint packed as a 48-bit integer; ordering follows this value.
    pub fn as_u64(&self) -> u64 {
        (u64::from(u32::from(self.ip)) << 16) | u64::from(self.port)
    }
}

impl PartialOrd for Endpoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Endpoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_u64().cmp(&other.as_u64())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Canonical, direction-free 5-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub ep_lo: Endpoint,
    pub ep_hi: Endpoint,
    pub proto: u8,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, proto: u8) -> Self {
        let (ep_lo, ep_hi) = if a <= b { (a, b) } else { (b, a) };
        Self { ep_lo, ep_hi, proto }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}/{}", self.ep_lo, self.ep_hi, Proto::from(self.proto).name())
    }
}

pub fn src_endpoint(pkt: &PacketRecord) -> Endpoint {
    Endpoint::new(pkt.src_ip, pkt.src_port)
}

pub fn dst_endpoint(pkt: &PacketRecord) -> Endpoint {
    Endpoint::new(pkt.dst_ip, pkt.dst_port)
}

/// Flow key of a packet. Ports come from the parsed record, which already
/// maps the ICMP echo identifier onto both ports and zeroes them for every
/// other ICMP type.
pub fn make_flow_key(pkt: &PacketRecord) -> FlowKey {
    FlowKey::new(src_endpoint(pkt), dst_endpoint(pkt), pkt.proto.number())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseClass {
    Response,
    NotResponse,
}

/// Decides whether `candidate` answers `request`.
///
/// ICMP error messages never count as an answer, and a buffered ICMP error
/// can never be answered either.
pub fn classify_response(request: &PacketRecord, candidate: &PacketRecord) -> ResponseClass {
    if candidate.is_icmp_error() || request.is_icmp_error() {
        return ResponseClass::NotResponse;
    }
    let opposite = src_endpoint(candidate) == dst_endpoint(request) && dst_endpoint(candidate) == src_endpoint(request);
    if opposite && candidate.proto == request.proto {
        ResponseClass::Response
    } else {
        ResponseClass::NotResponse
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{PacketBuilder, TcpFlags};
    use proptest::prelude::*;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn tcp_symmetry() {
        let a = PacketBuilder::tcp(ip("10.0.0.5"), 1234, ip("8.8.8.8"), 80, TcpFlags::SYN).build();
        let b = PacketBuilder::tcp(ip("8.8.8.8"), 80, ip("10.0.0.5"), 1234, TcpFlags::SYN | TcpFlags::ACK).build();
        assert_eq!(make_flow_key(&a), make_flow_key(&b));
    }

    #[test]
    fn echo_pairs_by_identifier() {
        let req = PacketBuilder::icmp_echo(ip("1.2.3.4"), ip("5.6.7.8"), true, 7, 1).build();
        let rep = PacketBuilder::icmp_echo(ip("5.6.7.8"), ip("1.2.3.4"), false, 7, 1).build();
        let other = PacketBuilder::icmp_echo(ip("5.6.7.8"), ip("1.2.3.4"), false, 8, 1).build();
        assert_eq!(make_flow_key(&req), make_flow_key(&rep));
        assert_ne!(make_flow_key(&req), make_flow_key(&other));
        assert_eq!(classify_response(&req, &rep), ResponseClass::Response);
    }

    #[test]
    fn udp_lexicographic_order() {
        let a = ip("10.0.0.1");
        let b = ip("10.0.0.2");
        let p = PacketBuilder::udp(b, 53, a, 53).build();
        let k = make_flow_key(&p);
        assert_eq!(k.ep_lo, Endpoint::new(a, 53));
        assert_eq!(k.ep_hi, Endpoint::new(b, 53));
    }

    #[test]
    fn syn_ack_is_response() {
        let syn = PacketBuilder::tcp(ip("1.1.1.1"), 40000, ip("10.0.0.9"), 80, TcpFlags::SYN).build();
        let synack =
            PacketBuilder::tcp(ip("10.0.0.9"), 80, ip("1.1.1.1"), 40000, TcpFlags::SYN | TcpFlags::ACK).build();
        assert_eq!(classify_response(&syn, &synack), ResponseClass::Response);
        // Same direction is never a response.
        assert_eq!(classify_response(&syn, &syn), ResponseClass::NotResponse);
    }

    #[test]
    fn icmp_port_unreachable_is_not_response() {
        let req = PacketBuilder::udp(ip("10.0.0.1"), 5555, ip("9.9.9.9"), 123).build();
        let err = PacketBuilder::icmp_error(ip("9.9.9.9"), 3, 3, &req).build();
        assert_eq!(classify_response(&req, &err), ResponseClass::NotResponse);
    }

    fn arb_packet() -> impl Strategy<Value = PacketRecord> {
        (any::<u32>(), any::<u32>(), any::<u16>(), any::<u16>(), 0u8..4, any::<u8>()).prop_map(
            |(s, d, sp, dp, kind, t)| {
                let (s, d) = (Ipv4Addr::from(s), Ipv4Addr::from(d));
                match kind {
                    0 => PacketBuilder::tcp(s, sp, d, dp, TcpFlags::SYN).build(),
                    1 => PacketBuilder::udp(s, sp, d, dp).build(),
                    2 => PacketBuilder::icmp_echo(s, d, t % 2 == 0, sp, dp).build(),
                    _ => PacketBuilder::icmp(s, d, t, 0).build(),
                }
            },
        )
    }

    proptest! {
        #[test]
        fn key_is_direction_free(p in arb_packet()) {
            let r = p.reversed();
            prop_assert_eq!(make_flow_key(&p), make_flow_key(&r));
            let k = make_flow_key(&p);
            prop_assert!(k.ep_lo <= k.ep_hi);
        }

        #[test]
        fn icmp_errors_never_respond(p in arb_packet(), t in prop::sample::select(vec![3u8, 11, 12]), code in any::<u8>()) {
            let err = PacketBuilder::icmp(p.dst_ip, p.src_ip, t, code).build();
            prop_assert_eq!(classify_response(&p, &err), ResponseClass::NotResponse);
        }
    }
}
