//! Classic pcap files (microsecond and nanosecond variants, either byte
//! order), Ethernet link type only.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use crate::packet::PacketRecord;
use crate::time::SimTime;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("file ends inside a {0}")]
    TruncatedFile(&'static str),
    #[error("unsupported link type {0}, only Ethernet (1) is read")]
    UnsupportedLinkType(u32),
}

pub struct PcapReader<R: Read> {
    inner: R,
    big_endian: bool,
    nanos: bool,
    snaplen: u32,
}

/// Reads exactly `buf.len()` bytes. `Ok(false)` on a clean end of input
/// before the first byte.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<bool, PcapError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(PcapError::TruncatedFile(what)),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        if !read_full(&mut inner, &mut hdr, "file header")? {
            return Err(PcapError::TruncatedFile("file header"));
        }
        let le = LittleEndian::read_u32(&hdr[0..4]);
        let be = BigEndian::read_u32(&hdr[0..4]);
        let (big_endian, nanos) = match (le, be) {
            (MAGIC_MICROS, _) => (false, false),
            (MAGIC_NANOS, _) => (false, true),
            (_, MAGIC_MICROS) => (true, false),
            (_, MAGIC_NANOS) => (true, true),
            _ => return Err(PcapError::BadMagic(le)),
        };
        let rd = |b: &[u8]| if big_endian { BigEndian::read_u32(b) } else { LittleEndian::read_u32(b) };
        let snaplen = rd(&hdr[16..20]);
        let link = rd(&hdr[20..24]);
        if link != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(link));
        }
        Ok(Self { inner, big_endian, nanos, snaplen })
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    pub fn is_nanosecond(&self) -> bool {
        self.nanos
    }

    /// Next raw frame with its timestamp, `None` at end of file.
    pub fn next_frame(&mut self) -> Result<Option<(SimTime, Vec<u8>)>, PcapError> {
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        if !read_full(&mut self.inner, &mut hdr, "record header")? {
            return Ok(None);
        }
        let rd = |b: &[u8]| if self.big_endian { BigEndian::read_u32(b) } else { LittleEndian::read_u32(b) };
        let secs = u64::from(rd(&hdr[0..4]));
        let frac = u64::from(rd(&hdr[4..8]));
        let incl = rd(&hdr[8..12]) as usize;
        let mut data = vec![0u8; incl];
        if incl > 0 && !read_full(&mut self.inner, &mut data, "packet record")? {
            return Err(PcapError::TruncatedFile("packet record"));
        }
        let nanos = if self.nanos { frac } else { frac * 1000 };
        Ok(Some((SimTime::from_nanos(secs * 1_000_000_000 + nanos), data)))
    }
}

/// Parsed contents of a capture.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PcapTrace {
    pub packets: Vec<PacketRecord>,
    /// Frames that were not Ethernet/IPv4 or could not be decoded.
    pub skipped: usize,
}

pub fn read_pcap_from<R: Read>(r: R) -> Result<PcapTrace, PcapError> {
    let mut reader = PcapReader::new(r)?;
    let mut out = PcapTrace::default();
    while let Some((ts, raw)) = reader.next_frame()? {
        match PacketRecord::parse(ts, raw) {
            Ok(p) => out.packets.push(p),
            Err(_) => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn read_pcap(path: &Path) -> Result<PcapTrace, PcapError> {
    read_pcap_from(BufReader::new(File::open(path)?))
}

/// Writes little-endian pcap files.
pub struct PcapWriter<W: Write> {
    inner: W,
    nanos: bool,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, nanos: bool) -> std::io::Result<Self> {
        inner.write_u32::<LittleEndian>(if nanos { MAGIC_NANOS } else { MAGIC_MICROS })?;
        inner.write_u16::<LittleEndian>(2)?;
        inner.write_u16::<LittleEndian>(4)?;
        inner.write_i32::<LittleEndian>(0)?;
        inner.write_u32::<LittleEndian>(0)?;
        inner.write_u32::<LittleEndian>(65_535)?;
        inner.write_u32::<LittleEndian>(LINKTYPE_ETHERNET)?;
        Ok(Self { inner, nanos })
    }

    pub fn write_frame(&mut self, ts: SimTime, raw: &[u8], orig_len: usize) -> std::io::Result<()> {
        let ns = ts.as_nanos();
        let secs = u32::try_from(ns / 1_000_000_000).unwrap_or(u32::MAX);
        let frac = if self.nanos { ns % 1_000_000_000 } else { (ns % 1_000_000_000) / 1000 };
        self.inner.write_u32::<LittleEndian>(secs)?;
        self.inner.write_u32::<LittleEndian>(frac as u32)?;
        self.inner.write_u32::<LittleEndian>(raw.len() as u32)?;
        self.inner.write_u32::<LittleEndian>(orig_len as u32)?;
        self.inner.write_all(raw)
    }

    pub fn write_packet(&mut self, pkt: &PacketRecord) -> std::io::Result<()> {
        self.write_frame(pkt.ts, &pkt.raw, pkt.raw.len())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Writes `packets` to a nanosecond-resolution pcap file.
pub fn write_pcap(path: &Path, packets: &[PacketRecord]) -> std::io::Result<()> {
    let mut w = PcapWriter::new(BufWriter::new(File::create(path)?), true)?;
    for p in packets {
        w.write_packet(p)?;
    }
    w.flush()
}
