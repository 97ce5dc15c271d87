//! Collector output rows.
//!
//! Columns, in order:
//!
//! | column       | content                                                    |
//! |--------------|------------------------------------------------------------|
//! | ts           | arrival time of the packet, seconds with 9 decimals         |
//! | direction    | `incoming` (external source) or `outgoing` (internal source)|
//! | reason       | `dt_expired` or `icmp_error`                               |
//! | dst_liveness | `alive`, `dark` (internal destination) or `external`        |
//! | src_ip       | source address as written in the packet                    |
//! | dst_ip       | destination address as written in the packet               |
//! | proto        | IP protocol number                                         |
//! | src_port     | source port, ICMP echo identifier, or 0                    |
//! | dst_port     | destination port, ICMP echo identifier, or 0               |
//! | flags        | TCP flag letters (`FSRPAU` subset) or `-`                  |
//! | icmp_type    | ICMP type, 0 for other protocols                           |
//! | icmp_code    | ICMP code, 0 for other protocols                           |
//! | anon         | 1 when internal addresses are obfuscated and payload cut   |

use std::io::{Read, Write};
use std::net::Ipv4Addr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::fsd::CollectReason;
use crate::packet::{PacketRecord, TcpFlags};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Incoming,
    Outgoing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstLiveness {
    Alive,
    Dark,
    External,
}

impl Serialize for CollectReason {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CollectReason {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match String::deserialize(d)?.as_str() {
            "dt_expired" => Ok(CollectReason::DtExpired),
            "icmp_error" => Ok(CollectReason::IcmpError),
            other => Err(serde::de::Error::custom(format!("unknown reason {other:?}"))),
        }
    }
}

/// One erroneous packet with its tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErroneousRecord {
    pub ts: SimTime,
    pub pkt: PacketRecord,
    pub direction: Direction,
    pub dst_liveness: DstLiveness,
    pub reason: CollectReason,
    pub internal_host_anon: bool,
}

impl ErroneousRecord {
    pub fn row(&self) -> RecordRow {
        let p = &self.pkt;
        RecordRow {
            ts: self.ts,
            direction: self.direction,
            reason: self.reason,
            dst_liveness: self.dst_liveness,
            src_ip: p.src_ip,
            dst_ip: p.dst_ip,
            proto: p.proto.number(),
            src_port: p.src_port,
            dst_port: p.dst_port,
            flags: if p.proto.number() == 6 { p.tcp_flags.letters() } else { "-".into() },
            icmp_type: p.icmp_type,
            icmp_code: p.icmp_code,
            anon: u8::from(self.internal_host_anon),
        }
    }
}

/// The serialized form of an [`ErroneousRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRow {
    #[serde(serialize_with = "ser_ts", deserialize_with = "de_ts")]
    pub ts: SimTime,
    pub direction: Direction,
    pub reason: CollectReason,
    pub dst_liveness: DstLiveness,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: u8,
    pub src_port: u16,
    pub dst_port: u16,
    pub flags: String,
    pub icmp_type: u8,
    pub icmp_code: u8,
    pub anon: u8,
}

impl RecordRow {
    pub fn tcp_flags(&self) -> TcpFlags {
        TcpFlags::from_letters(&self.flags)
    }
}

fn ser_ts<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(t)
}

fn de_ts<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
    let s = String::deserialize(d)?;
    parse_ts(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
}

/// Parses `secs[.fraction]` exactly, up to nanosecond precision.
pub fn parse_ts(s: &str) -> Option<SimTime> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    let secs: u64 = whole.parse().ok()?;
    if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let nanos: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<9}").parse().ok()? };
    Some(SimTime::from_nanos(secs.checked_mul(1_000_000_000)?.checked_add(nanos)?))
}

pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(w: W) -> Self {
        Self { inner: csv::WriterBuilder::new().has_headers(true).from_writer(w) }
    }

    pub fn write(&mut self, row: &RecordRow) -> Result<(), csv::Error> {
        self.inner.serialize(row)
    }

    /// Writes the header even when no row follows.
    pub fn write_header_only(&mut self) -> Result<(), csv::Error> {
        self.inner.write_record(HEADER)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> Result<W, String> {
        self.inner.into_inner().map_err(|e| e.to_string())
    }
}

pub const HEADER: [&str; 13] = [
    "ts",
    "direction",
    "reason",
    "dst_liveness",
    "src_ip",
    "dst_ip",
    "proto",
    "src_port",
    "dst_port",
    "flags",
    "icmp_type",
    "icmp_code",
    "anon",
];

pub fn read_records<R: Read>(r: R) -> Result<Vec<RecordRow>, csv::Error> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(r).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::PacketBuilder;

    #[test]
    fn timestamp_round_trip() {
        for ns in [0u64, 1, 999_999_999, 1_000_000_000, 12_345_678_901_234] {
            let t = SimTime::from_nanos(ns);
            assert_eq!(parse_ts(&t.to_string()), Some(t));
        }
        assert_eq!(parse_ts("1.5"), Some(SimTime::from_millis(1500)));
        assert_eq!(parse_ts("1.0000000001"), None);
    }

    #[test]
    fn csv_round_trip_keeps_column_order() {
        let pkt = PacketBuilder::tcp("8.8.8.8".parse().unwrap(), 1, "10.0.0.1".parse().unwrap(), 23, TcpFlags::SYN)
            .at(SimTime::from_millis(1500))
            .build();
        let rec = ErroneousRecord {
            ts: pkt.ts,
            pkt,
            direction: Direction::Incoming,
            dst_liveness: DstLiveness::Dark,
            reason: CollectReason::DtExpired,
            internal_host_anon: true,
        };
        let mut w = RecordWriter::new(Vec::new());
        w.write(&rec.row()).unwrap();
        let bytes = w.into_inner().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "1.500000000,incoming,dt_expired,dark,8.8.8.8,10.0.0.1,6,1,23,S,0,0,1"
        );
        assert_eq!(read_records(&bytes[..]).unwrap(), vec![rec.row()]);
    }

    #[test]
    fn empty_output_has_header() {
        let mut w = RecordWriter::new(Vec::new());
        w.write_header_only().unwrap();
        let bytes = w.into_inner().unwrap();
        assert!(read_records(&bytes[..]).unwrap().is_empty());
    }
}
