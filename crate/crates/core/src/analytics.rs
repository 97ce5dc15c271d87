//! Offline aggregations over collector records.
//!
//! All functions take parsed [`RecordRow`]s. Internal addresses in anonymized
//! rows are restored with the deployment key where a computation needs the
//! real address (telescope membership); counting distinct hosts works on
//! either form since the obfuscation is a bijection.
//!
//! Standard deviations are population deviations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use crate::anonymizer::deobfuscate_ip;
use crate::collector::{Direction, DstLiveness, RecordRow};
use crate::config::NetworkConfig;
use crate::net::{Ipv4Prefix, PrefixError};

pub const SECS_PER_HOUR: u64 = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HostClass {
    Telescope,
    Active,
    Dark,
}

impl HostClass {
    pub fn name(self) -> &'static str {
        match self {
            HostClass::Telescope => "telescope",
            HostClass::Active => "active",
            HostClass::Dark => "dark",
        }
    }

    pub fn parse(s: &str) -> Option<HostClass> {
        match s {
            "telescope" => Some(HostClass::Telescope),
            "active" => Some(HostClass::Active),
            "dark" => Some(HostClass::Dark),
            _ => None,
        }
    }
}

/// The real internal destination of an incoming row, if it has one.
pub fn internal_destination(row: &RecordRow, net: &NetworkConfig) -> Option<Ipv4Addr> {
    if row.direction != Direction::Incoming || row.dst_liveness == DstLiveness::External {
        return None;
    }
    Some(if row.anon == 1 { deobfuscate_ip(row.dst_ip, net.anonymization_key) } else { row.dst_ip })
}

/// Class of every internal destination in `records`: telescope by address,
/// otherwise active if any row towards it was tagged alive, otherwise dark.
pub fn host_classes(records: &[RecordRow], net: &NetworkConfig) -> HashMap<Ipv4Addr, HostClass> {
    let mut out = HashMap::new();
    for r in records {
        let Some(h) = internal_destination(r, net) else { continue };
        let class = if net.is_telescope(h) {
            HostClass::Telescope
        } else if r.dst_liveness == DstLiveness::Alive {
            HostClass::Active
        } else {
            HostClass::Dark
        };
        let e = out.entry(h).or_insert(class);
        if class == HostClass::Active {
            *e = HostClass::Active;
        }
    }
    out
}

/// One row of the hourly sender table.
#[derive(Debug, Clone, PartialEq)]
pub struct HourRow {
    pub hour: u64,
    pub unique_src_ips: usize,
    pub unique_ports: usize,
    /// Mean distinct senders per internal destination host.
    pub mean_senders_per_host: f64,
    pub std_senders_per_host: f64,
    /// Deviation of distinct destination ports per internal host.
    pub std_ports: f64,
    pub acked_scanner_count: usize,
}

/// Sums in ascending order so the result does not depend on map iteration.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}

#[derive(Default)]
struct HourAcc {
    srcs: HashSet<Ipv4Addr>,
    ports: HashSet<u16>,
    senders: HashMap<Ipv4Addr, HashSet<Ipv4Addr>>,
    host_ports: HashMap<Ipv4Addr, HashSet<u16>>,
}

/// Per-hour statistics over incoming rows, from the first to the last hour
/// seen, with empty hours as zero rows.
pub fn hourly_sender_stats(records: &[RecordRow], net: &NetworkConfig, acked: &[Ipv4Prefix]) -> Vec<HourRow> {
    let mut hours: BTreeMap<u64, HourAcc> = BTreeMap::new();
    for r in records.iter().filter(|r| r.direction == Direction::Incoming) {
        let acc = hours.entry(r.ts.as_nanos() / 1_000_000_000 / SECS_PER_HOUR).or_default();
        acc.srcs.insert(r.src_ip);
        acc.ports.insert(r.dst_port);
        if let Some(h) = internal_destination(r, net) {
            acc.senders.entry(h).or_default().insert(r.src_ip);
            acc.host_ports.entry(h).or_default().insert(r.dst_port);
        }
    }
    let (Some(&first), Some(&last)) = (hours.keys().next(), hours.keys().next_back()) else {
        return Vec::new();
    };
    (first..=last)
        .map(|hour| {
            let Some(acc) = hours.get(&hour) else {
                return HourRow {
                    hour,
                    unique_src_ips: 0,
                    unique_ports: 0,
                    mean_senders_per_host: 0.0,
                    std_senders_per_host: 0.0,
                    std_ports: 0.0,
                    acked_scanner_count: 0,
                };
            };
            let senders: Vec<f64> = acc.senders.values().map(|s| s.len() as f64).collect();
            let ports: Vec<f64> = acc.host_ports.values().map(|s| s.len() as f64).collect();
            let (mean_ip, std_ip) = mean_std(&senders);
            HourRow {
                hour,
                unique_src_ips: acc.srcs.len(),
                unique_ports: acc.ports.len(),
                mean_senders_per_host: mean_ip,
                std_senders_per_host: std_ip,
                std_ports: mean_std(&ports).1,
                acked_scanner_count: acc.srcs.iter().filter(|ip| acked.iter().any(|p| p.contains(**ip))).count(),
            }
        })
        .collect()
}

/// Incoming rows per destination port, restricted to hosts of `class`.
pub fn per_port_histogram(records: &[RecordRow], class: HostClass, net: &NetworkConfig) -> BTreeMap<u16, u64> {
    let classes = host_classes(records, net);
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(h) = internal_destination(r, net) {
            if classes.get(&h) == Some(&class) {
                *out.entry(r.dst_port).or_insert(0) += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScanPattern {
    /// Few ports across many hosts.
    Horizontal,
    /// Many ports, or a single target, on few hosts.
    Vertical,
    Mixed,
}

impl ScanPattern {
    pub fn name(self) -> &'static str {
        match self {
            ScanPattern::Horizontal => "horizontal",
            ScanPattern::Vertical => "vertical",
            ScanPattern::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanThresholds {
    /// Minimum distinct hosts for a horizontal scan.
    pub theta_d: usize,
    /// Maximum distinct ports for a horizontal scan.
    pub theta_p: usize,
    /// Minimum distinct ports for a vertical scan.
    pub theta_p_prime: usize,
    /// Maximum distinct hosts for a vertical scan.
    pub theta_d_prime: usize,
    pub min_packets: usize,
}

impl Default for ScanThresholds {
    fn default() -> Self {
        Self { theta_d: 100, theta_p: 5, theta_p_prime: 100, theta_d_prime: 5, min_packets: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("insufficient data: {got} packets, at least {need} required")]
pub struct InsufficientData {
    pub got: usize,
    pub need: usize,
}

/// Classifies one sender's rows by distinct destination hosts `D` and ports
/// `P`. Horizontal: `D >= theta_d` and `P <= theta_p`. Vertical: `D <=
/// theta_d'` and either `P >= theta_p'` or `P <= theta_p` (a concentrated
/// flood on one service of one host counts as vertical). Mixed otherwise.
pub fn classify_scanner(rows: &[RecordRow], th: &ScanThresholds) -> Result<ScanPattern, InsufficientData> {
    if rows.len() < th.min_packets.max(1) {
        return Err(InsufficientData { got: rows.len(), need: th.min_packets.max(1) });
    }
    let d = rows.iter().map(|r| r.dst_ip).collect::<HashSet<_>>().len();
    let p = rows.iter().map(|r| r.dst_port).collect::<HashSet<_>>().len();
    Ok(if d >= th.theta_d && p <= th.theta_p {
        ScanPattern::Horizontal
    } else if d <= th.theta_d_prime && (p >= th.theta_p_prime || p <= th.theta_p) {
        ScanPattern::Vertical
    } else {
        ScanPattern::Mixed
    })
}

/// Per-sender classification with the distinct host and port counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenderClass {
    pub src: Ipv4Addr,
    pub packets: usize,
    pub hosts: usize,
    pub ports: usize,
    pub pattern: Result<ScanPattern, InsufficientData>,
}

/// Groups rows by source and classifies each sender, ordered by address.
pub fn classify_senders(records: &[RecordRow], th: &ScanThresholds) -> Vec<SenderClass> {
    let mut by_src: BTreeMap<Ipv4Addr, Vec<RecordRow>> = BTreeMap::new();
    for r in records {
        by_src.entry(r.src_ip).or_default().push(r.clone());
    }
    by_src
        .into_iter()
        .map(|(src, rows)| SenderClass {
            src,
            packets: rows.len(),
            hosts: rows.iter().map(|r| r.dst_ip).collect::<HashSet<_>>().len(),
            ports: rows.iter().map(|r| r.dst_port).collect::<HashSet<_>>().len(),
            pattern: classify_scanner(&rows, th),
        })
        .collect()
}

/// Empirical CCDF `P(X >= v)` of distinct external senders per internal
/// destination host, one point per distinct value, ascending.
pub fn sender_ccdf(records: &[RecordRow], net: &NetworkConfig) -> Vec<(usize, f64)> {
    let mut senders: HashMap<Ipv4Addr, HashSet<Ipv4Addr>> = HashMap::new();
    for r in records {
        if let Some(h) = internal_destination(r, net) {
            senders.entry(h).or_default().insert(r.src_ip);
        }
    }
    let n = senders.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in senders.values() {
        *counts.entry(s.len()).or_insert(0) += 1;
    }
    let mut at_least = n;
    let mut out = Vec::with_capacity(counts.len());
    for (v, c) in counts {
        out.push((v, at_least as f64 / n as f64));
        at_least -= c;
    }
    out
}

/// Newline-delimited prefixes; bare addresses mean `/32`, `#` starts a comment.
pub fn parse_prefix_list(text: &str) -> Result<Vec<Ipv4Prefix>, (usize, PrefixError)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let p = if line.contains('/') { line.parse() } else { format!("{line}/32").parse() };
        out.push(p.map_err(|e| (i + 1, e))?);
    }
    Ok(out)
}

pub fn hourly_csv(rows: &[HourRow]) -> String {
    let mut s = String::from(
        "hour,unique_src_ips,unique_ports,mean_senders_per_host,std_senders_per_host,std_ports,acked_scanners\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            r.hour,
            r.unique_src_ips,
            r.unique_ports,
            r.mean_senders_per_host,
            r.std_senders_per_host,
            r.std_ports,
            r.acked_scanner_count
        );
    }
    s
}

pub fn histogram_csv(h: &BTreeMap<u16, u64>) -> String {
    let mut s = String::from("port,packets\n");
    for (p, c) in h {
        let _ = writeln!(s, "{p},{c}");
    }
    s
}

pub fn senders_csv(rows: &[SenderClass]) -> String {
    let mut s = String::from("src_ip,packets,hosts,ports,pattern\n");
    for r in rows {
        let pattern = r.pattern.map(ScanPattern::name).unwrap_or("insufficient_data");
        let _ = writeln!(s, "{},{},{},{},{}", r.src, r.packets, r.hosts, r.ports, pattern);
    }
    s
}

pub fn ccdf_csv(points: &[(usize, f64)]) -> String {
    let mut s = String::from("senders_per_host,ccdf\n");
    for (v, p) in points {
        let _ = writeln!(s, "{v},{p:.6}");
    }
    s
}

/// Distinct internal destinations per class, for partition checks.
pub fn class_members(records: &[RecordRow], net: &NetworkConfig) -> BTreeMap<HostClass, BTreeSet<Ipv4Addr>> {
    let mut out: BTreeMap<HostClass, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for (h, c) in host_classes(records, net) {
        out.entry(c).or_default().insert(h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymizer::obfuscate_ip;
    use crate::fsd::CollectReason;
    use crate::time::SimTime;

    fn row(ts: u64, src: &str, dst: Ipv4Addr, port: u16, live: DstLiveness) -> RecordRow {
        RecordRow {
            ts: SimTime::from_secs(ts),
            direction: Direction::Incoming,
            reason: CollectReason::DtExpired,
            dst_liveness: live,
            src_ip: src.parse().unwrap(),
            dst_ip: dst,
            proto: 6,
            src_port: 40000,
            dst_port: port,
            flags: "S".into(),
            icmp_type: 0,
            icmp_code: 0,
            anon: 0,
        }
    }

    fn host(i: u8) -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, i)
    }

    #[test]
    fn two_senders_three_hosts_each() {
        let net = NetworkConfig::default();
        let mut rows = Vec::new();
        for s in ["1.1.1.1", "2.2.2.2"] {
            for h in 50..53 {
                rows.push(row(10, s, host(h), 23, DstLiveness::Dark));
            }
        }
        let t = hourly_sender_stats(&rows, &net, &[]);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].unique_src_ips, 2);
        assert_eq!(t[0].mean_senders_per_host, 2.0);
        assert_eq!(t[0].std_senders_per_host, 0.0);
    }

    #[test]
    fn port_sweep_counts_ports() {
        let net = NetworkConfig::default();
        let rows: Vec<_> =
            (0..62_000u32).map(|p| row(1, "3.3.3.3", host(60), (p + 1) as u16, DstLiveness::Dark)).collect();
        assert_eq!(hourly_sender_stats(&rows, &net, &[])[0].unique_ports, 62_000);
    }

    #[test]
    fn empty_hours_are_zero_rows() {
        let net = NetworkConfig::default();
        let rows = vec![
            row(10, "1.1.1.1", host(50), 23, DstLiveness::Dark),
            row(3 * 3600 + 5, "1.1.1.1", host(50), 23, DstLiveness::Dark),
        ];
        let t = hourly_sender_stats(&rows, &net, &[]);
        assert_eq!(t.iter().map(|r| r.hour).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(t[1].unique_src_ips, 0);
    }

    #[test]
    fn acknowledged_scanners_match_by_prefix() {
        let net = NetworkConfig::default();
        let rows = vec![
            row(1, "71.6.1.1", host(50), 23, DstLiveness::Dark),
            row(1, "71.6.2.2", host(50), 23, DstLiveness::Dark),
            row(1, "8.8.8.8", host(50), 23, DstLiveness::Dark),
        ];
        let acked = parse_prefix_list("# scanners\n71.6.0.0/16\n1.2.3.4\n").unwrap();
        assert_eq!(acked.len(), 2);
        assert_eq!(hourly_sender_stats(&rows, &net, &acked)[0].acked_scanner_count, 2);
        assert!(parse_prefix_list("bogus").is_err());
    }

    #[test]
    fn classes_use_the_real_address() {
        let net = NetworkConfig::default();
        let mut tel = row(1, "1.1.1.1", obfuscate_ip(host(3), net.anonymization_key), 23, DstLiveness::Dark);
        tel.anon = 1;
        let rows = vec![
            tel,
            row(1, "1.1.1.1", host(50), 23, DstLiveness::Dark),
            row(1, "1.1.1.1", host(51), 80, DstLiveness::Dark),
            row(2, "1.1.1.1", host(51), 80, DstLiveness::Alive),
        ];
        let c = host_classes(&rows, &net);
        assert_eq!(c[&host(3)], HostClass::Telescope);
        assert_eq!(c[&host(50)], HostClass::Dark);
        assert_eq!(c[&host(51)], HostClass::Active);
        assert_eq!(per_port_histogram(&rows, HostClass::Active, &net), BTreeMap::from([(80, 2)]));
        assert_eq!(per_port_histogram(&rows, HostClass::Telescope, &net), BTreeMap::from([(23, 1)]));
    }

    #[test]
    fn scan_patterns() {
        let th = ScanThresholds::default();
        let horizontal: Vec<_> =
            (0..1000u32).map(|i| row(1, "1.1.1.1", Ipv4Addr::from(0x0a00_0000 + i), 23, DstLiveness::Dark)).collect();
        assert_eq!(classify_scanner(&horizontal, &th), Ok(ScanPattern::Horizontal));
        let vertical: Vec<_> = (0..60_000u32)
            .map(|i| row(1, "1.1.1.1", host((i % 2) as u8), (i / 2 + 1) as u16, DstLiveness::Dark))
            .collect();
        assert_eq!(classify_scanner(&vertical, &th), Ok(ScanPattern::Vertical));
        let ntp: Vec<_> = (0..3000).map(|_| row(1, "1.1.1.1", host(9), 123, DstLiveness::Alive)).collect();
        assert_eq!(classify_scanner(&ntp, &th), Ok(ScanPattern::Vertical));
        let mixed: Vec<_> = (0..50u32).map(|i| row(1, "1.1.1.1", host(i as u8), i as u16, DstLiveness::Dark)).collect();
        assert_eq!(classify_scanner(&mixed, &th), Ok(ScanPattern::Mixed));
        assert_eq!(classify_scanner(&mixed[..3], &th), Err(InsufficientData { got: 3, need: 10 }));
    }

    #[test]
    fn ccdf_single_host_step() {
        let net = NetworkConfig::default();
        let rows: Vec<_> = (0..7).map(|i| row(1, &format!("1.1.1.{i}"), host(50), 23, DstLiveness::Dark)).collect();
        assert_eq!(sender_ccdf(&rows, &net), vec![(7, 1.0)]);
    }

    #[test]
    fn ccdf_is_non_increasing() {
        let net = NetworkConfig::default();
        let mut rows = Vec::new();
        for h in 0..20u8 {
            for s in 0..=h {
                rows.push(row(1, &format!("1.1.1.{s}"), host(100 + h), 23, DstLiveness::Dark));
            }
        }
        let c = sender_ccdf(&rows, &net);
        assert_eq!(c.first(), Some(&(1, 1.0)));
        assert!(c.windows(2).all(|w| w[0].1 >= w[1].1 && w[0].0 < w[1].0));
    }
}
