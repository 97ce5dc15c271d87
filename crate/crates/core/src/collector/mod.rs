//! Terminal sink for erroneous packets, plus the impersonating responder.

pub mod record;
pub mod responder;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::config::{CollectorConfig, NetworkConfig};
use crate::fsd::ExpiredPacket;
use crate::ingest::pcap::PcapWriter;
use crate::packet::{PacketRecord, Proto};
use crate::time::SimTime;

pub use record::{Direction, DstLiveness, ErroneousRecord, RecordRow, RecordWriter};
pub use responder::{Responder, Transcript};

/// Destination for collected records.
pub trait RecordSink {
    fn write(&mut self, rec: &ErroneousRecord) -> std::io::Result<()>;
    fn finish(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct VecSink(pub Vec<ErroneousRecord>);

impl RecordSink for VecSink {
    fn write(&mut self, rec: &ErroneousRecord) -> std::io::Result<()> {
        self.0.push(rec.clone());
        Ok(())
    }
}

/// CSV records and, optionally, a pcap dump of the collected frames.
pub struct FileSink<W: Write> {
    csv: RecordWriter<W>,
    pcap: Option<PcapWriter<W>>,
    empty: bool,
}

impl<W: Write> FileSink<W> {
    pub fn new(csv: W, pcap: Option<W>) -> std::io::Result<Self> {
        let pcap = pcap.map(|w| PcapWriter::new(w, true)).transpose()?;
        Ok(Self { csv: RecordWriter::new(csv), pcap, empty: true })
    }
}

impl FileSink<BufWriter<File>> {
    /// `records.csv` and, when `pcap` is set, `collected.pcap` under `dir`.
    pub fn create(dir: &Path, pcap: bool) -> std::io::Result<Self> {
        let csv = BufWriter::new(File::create(dir.join("records.csv"))?);
        let pcap = if pcap { Some(BufWriter::new(File::create(dir.join("collected.pcap"))?)) } else { None };
        Self::new(csv, pcap)
    }
}

impl<W: Write> RecordSink for FileSink<W> {
    fn write(&mut self, rec: &ErroneousRecord) -> std::io::Result<()> {
        self.empty = false;
        self.csv.write(&rec.row()).map_err(std::io::Error::other)?;
        if let Some(p) = &mut self.pcap {
            p.write_frame(rec.ts, &rec.pkt.raw, rec.pkt.raw.len())?;
        }
        Ok(())
    }

    fn finish(&mut self) -> std::io::Result<()> {
        if self.empty {
            self.csv.write_header_only().map_err(std::io::Error::other)?;
            self.empty = false;
        }
        self.csv.flush()?;
        if let Some(p) = &mut self.pcap {
            p.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CollectorStats {
    pub records: u64,
    pub incoming: u64,
    pub outgoing: u64,
    pub icmp_errors: u64,
    pub sink_errors: u64,
    pub replies: u64,
}

pub struct Collector {
    net: Arc<NetworkConfig>,
    sink: Box<dyn RecordSink>,
    responder: Option<Responder>,
    stats: CollectorStats,
}

impl Collector {
    pub fn new(net: Arc<NetworkConfig>, cfg: &CollectorConfig, sink: Box<dyn RecordSink>) -> Self {
        let responder = (cfg.responder && !net.impersonation.is_empty())
            .then(|| Responder::new(net.impersonation.clone(), cfg.responder_capacity, cfg.isn_seed));
        Self { net, sink, responder, stats: CollectorStats::default() }
    }

    /// Tags and writes one collected packet. `dst_alive` is the engine's
    /// liveness verdict for an internal destination, ignored otherwise.
    pub fn record(&mut self, exp: &ExpiredPacket, dst_alive: bool) -> ErroneousRecord {
        let key = self.net.anonymization_key;
        let direction =
            if self.net.is_internal(exp.pkt.real_src(key)) { Direction::Outgoing } else { Direction::Incoming };
        let dst_liveness = if !self.net.is_internal(exp.pkt.real_dst(key)) {
            DstLiveness::External
        } else if dst_alive {
            DstLiveness::Alive
        } else {
            DstLiveness::Dark
        };
        let rec = ErroneousRecord {
            ts: exp.pkt.pkt.ts,
            pkt: exp.pkt.pkt.clone(),
            direction,
            dst_liveness,
            reason: exp.reason,
            internal_host_anon: exp.pkt.is_anonymized(),
        };
        self.stats.records += 1;
        match direction {
            Direction::Incoming => self.stats.incoming += 1,
            Direction::Outgoing => self.stats.outgoing += 1,
        }
        if rec.reason == crate::fsd::CollectReason::IcmpError {
            self.stats.icmp_errors += 1;
        }
        if self.sink.write(&rec).is_err() {
            self.stats.sink_errors += 1;
        }
        rec
    }

    /// Hands an impersonated TCP packet to the responder.
    pub fn respond(&mut self, exp: &ExpiredPacket, now: SimTime) -> Option<PacketRecord> {
        if !exp.pkt.meta.impersonated || exp.pkt.pkt.proto != Proto::Tcp {
            return None;
        }
        let reply = self.responder.as_mut()?.responder_step(&exp.pkt.pkt, now);
        if reply.is_some() {
            self.stats.replies += 1;
        }
        reply
    }

    pub fn take_transcripts(&mut self) -> Vec<Transcript> {
        self.responder.as_mut().map(Responder::take_transcripts).unwrap_or_default()
    }

    pub fn finish(&mut self) -> std::io::Result<()> {
        self.sink.finish()
    }

    pub fn stats(&self) -> &CollectorStats {
        &self.stats
    }

    pub fn responder(&self) -> Option<&Responder> {
        self.responder.as_ref()
    }
}
