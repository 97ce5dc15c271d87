//! Seeded synthetic traffic.
//!
//! Flows start as a Poisson process. Each flow is incoming (external
//! initiator) or outgoing (internal initiator), answered or not, and may be
//! retransmitted before the answer. Answered flows continue with follow-up
//! packets in both directions. Unanswered UDP flows may draw an ICMP
//! port-unreachable instead of an answer.
//!
//! Config section (all keys optional):
//!
//! ```toml
//! [workload]
//! duration = 10.0
//! flow_rate = 100.0
//! answered_fraction = 0.5
//! incoming_fraction = 0.7
//! proto_mix = { tcp = 0.7, udp = 0.25, icmp = 0.05 }
//! incoming_delay = { kind = "log_normal", median = 0.003, sigma = 1.0 }
//! outgoing_delay = { kind = "log_normal", median = 0.030, sigma = 1.5 }
//! duplicate_probability = 0.1
//! max_duplicates = 2
//! retransmit_gap = 0.3
//! icmp_error_fraction = 0.1
//! followup_min = 0
//! followup_max = 0
//! followup_start = 0.05
//! followup_gap = 0.01
//! whitelist_fraction = 0.0
//! whitelist_services = 400
//! active_hosts = 20
//! telescope_fraction = 0.3
//! external_hosts = 5000
//! unique_endpoints = false
//! payload_len = 32
//! server_ports = [22, 23, 80, 443, 445, 3389, 8080]
//! ```
//!
//! Delay distributions: `fixed {value}`, `uniform {low, high}`,
//! `exponential {mean}`, `log_normal {median, sigma}` and
//! `mixture {components = [{weight, dist}, ...]}`. All values in seconds.

use std::net::Ipv4Addr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::Deserialize;

use crate::config::NetworkConfig;
use crate::flow::{make_flow_key, FlowKey};
use crate::packet::{PacketBuilder, PacketRecord, TcpFlags};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayDist {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    LogNormal { median: f64, sigma: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: DelayDist,
}

impl DelayDist {
    fn check(&self) -> Result<(), String> {
        let ok = |c: bool, m: &str| if c { Ok(()) } else { Err(m.to_string()) };
        match self {
            DelayDist::Fixed { value } => ok(value.is_finite() && *value >= 0.0, "fixed value must be >= 0"),
            DelayDist::Uniform { low, high } => {
                ok(low.is_finite() && high.is_finite() && *low >= 0.0 && low <= high, "uniform needs 0 <= low <= high")
            }
            DelayDist::Exponential { mean } => ok(mean.is_finite() && *mean > 0.0, "exponential mean must be > 0"),
            DelayDist::LogNormal { median, sigma } => ok(
                median.is_finite() && *median > 0.0 && sigma.is_finite() && *sigma >= 0.0,
                "log_normal needs median > 0 and sigma >= 0",
            ),
            DelayDist::Mixture { components } => {
                if components.is_empty() || components.iter().any(|c| !(c.weight >= 0.0 && c.weight.is_finite())) {
                    return Err("mixture needs non-negative weights".into());
                }
                if components.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
                    return Err("mixture weights sum to zero".into());
                }
                components.iter().try_for_each(|c| c.dist.check())
            }
        }
    }

    /// Draws one delay in seconds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DelayDist::Fixed { value } => *value,
            DelayDist::Uniform { low, high } => {
                if high > low {
                    rng.random_range(*low..*high)
                } else {
                    *low
                }
            }
            DelayDist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            DelayDist::LogNormal { median, sigma } => {
                LogNormal::new(median.ln(), *sigma).expect("validated").sample(rng)
            }
            DelayDist::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut x = rng.random::<f64>() * total;
                for c in components {
                    if x < c.weight {
                        return c.dist.sample(rng);
                    }
                    x -= c.weight;
                }
                components.last().expect("validated").dist.sample(rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoMix {
    pub tcp: f64,
    pub udp: f64,
    pub icmp: f64,
}

impl Default for ProtoMix {
    fn default() -> Self {
        Self { tcp: 0.7, udp: 0.25, icmp: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub duration: f64,
    pub flow_rate: f64,
    pub answered_fraction: f64,
    pub incoming_fraction: f64,
    pub proto_mix: ProtoMix,
    pub incoming_delay: DelayDist,
    pub outgoing_delay: DelayDist,
    pub duplicate_probability: f64,
    pub max_duplicates: u32,
    pub retransmit_gap: f64,
    pub icmp_error_fraction: f64,
    pub followup_min: u32,
    pub followup_max: u32,
    pub followup_start: f64,
    pub followup_gap: f64,
    pub whitelist_fraction: f64,
    pub whitelist_services: u32,
    pub active_hosts: u32,
    pub telescope_fraction: f64,
    pub external_hosts: u32,
    /// Never reuse an endpoint across flows.
    pub unique_endpoints: bool,
    pub payload_len: u32,
    pub server_ports: Vec<u16>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            duration: 10.0,
            flow_rate: 100.0,
            answered_fraction: 0.5,
            incoming_fraction: 0.7,
            proto_mix: ProtoMix::default(),
            incoming_delay: DelayDist::LogNormal { median: 0.003, sigma: 1.0 },
            outgoing_delay: DelayDist::LogNormal { median: 0.030, sigma: 1.5 },
            duplicate_probability: 0.1,
            max_duplicates: 2,
            retransmit_gap: 0.3,
            icmp_error_fraction: 0.1,
            followup_min: 0,
            followup_max: 0,
            followup_start: 0.05,
            followup_gap: 0.01,
            whitelist_fraction: 0.0,
            whitelist_services: 400,
            active_hosts: 20,
            telescope_fraction: 0.3,
            external_hosts: 5000,
            unique_endpoints: false,
            payload_len: 32,
            server_ports: vec![22, 23, 80, 443, 445, 3389, 8080],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("workload.{field}: {msg}")]
pub struct WorkloadError {
    pub field: String,
    pub msg: String,
}

fn werr(field: &str, msg: impl Into<String>) -> WorkloadError {
    WorkloadError { field: field.into(), msg: msg.into() }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(werr("duration", "must be > 0"));
        }
        if !(self.flow_rate.is_finite() && self.flow_rate > 0.0) {
            return Err(werr("flow_rate", "must be > 0"));
        }
        for (k, v) in [
            ("answered_fraction", self.answered_fraction),
            ("incoming_fraction", self.incoming_fraction),
            ("duplicate_probability", self.duplicate_probability),
            ("icmp_error_fraction", self.icmp_error_fraction),
            ("whitelist_fraction", self.whitelist_fraction),
            ("telescope_fraction", self.telescope_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(werr(k, "must lie in [0, 1]"));
            }
        }
        let m = &self.proto_mix;
        if [m.tcp, m.udp, m.icmp].iter().any(|w| !(w.is_finite() && *w >= 0.0)) || m.tcp + m.udp + m.icmp <= 0.0 {
            return Err(werr("proto_mix", "weights must be >= 0 and not all zero"));
        }
        self.incoming_delay.check().map_err(|e| werr("incoming_delay", e))?;
        self.outgoing_delay.check().map_err(|e| werr("outgoing_delay", e))?;
        if self.followup_min > self.followup_max {
            return Err(werr("followup_min", "must not exceed followup_max"));
        }
        for (k, v) in [
            ("retransmit_gap", self.retransmit_gap),
            ("followup_start", self.followup_start),
            ("followup_gap", self.followup_gap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(werr(k, "must be >= 0"));
            }
        }
        if self.active_hosts == 0 {
            return Err(werr("active_hosts", "must be > 0"));
        }
        if self.external_hosts == 0 {
            return Err(werr("external_hosts", "must be > 0"));
        }
        if self.server_ports.is_empty() {
            return Err(werr("server_ports", "must not be empty"));
        }
        if self.whitelist_fraction > 0.0 && self.whitelist_services == 0 {
            return Err(werr("whitelist_services", "must be > 0 when whitelist_fraction > 0"));
        }
        Ok(())
    }
}

/// Whitelisted services the generator targets: addresses in 198.18.0.0/15,
/// port 443.
pub fn whitelist_entries(spec: &WorkloadSpec) -> Vec<(Ipv4Addr, u16)> {
    (0..spec.whitelist_services).map(|i| (Ipv4Addr::from(0xc612_0000 + i), 443)).collect()
}

const EXTERNAL_BASE: u32 = 0x1400_0000; // 20.0.0.0

/// What the generator decided for one flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTruth {
    pub id: usize,
    pub key: FlowKey,
    pub t0: SimTime,
    pub proto: u8,
    pub incoming: bool,
    pub answered: bool,
    pub whitelisted: bool,
    /// Delay between the first request and the answer.
    pub delay: Option<Duration>,
    pub icmp_error: bool,
    /// Requests sent, first one included.
    pub requests: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Workload {
    /// Sorted by timestamp.
    pub packets: Vec<PacketRecord>,
    pub flows: Vec<FlowTruth>,
    pub whitelist: Vec<(Ipv4Addr, u16)>,
}

struct Pools {
    active: Vec<Ipv4Addr>,
    dark: Vec<Ipv4Addr>,
    telescope: Vec<Ipv4Addr>,
}

fn pools(net: &NetworkConfig, active_hosts: usize) -> Pools {
    let total = net.internal.address_count().min(1 << 20);
    let (mut telescope, mut plain) = (Vec::new(), Vec::new());
    for i in 0..total {
        let ip = net.internal.address_at(i).expect("in range");
        if net.is_telescope(ip) {
            telescope.push(ip);
        } else {
            plain.push(ip);
        }
    }
    // Spread the active hosts evenly over the non-telescope space.
    let n = active_hosts.min(plain.len().saturating_sub(1)).max(1);
    let stride = (plain.len() / n).max(1);
    let mut active = Vec::new();
    let mut dark = Vec::new();
    for (i, ip) in plain.into_iter().enumerate() {
        if i % stride == 0 && active.len() < n {
            active.push(ip);
        } else {
            dark.push(ip);
        }
    }
    if dark.is_empty() {
        dark = active.clone();
    }
    if telescope.is_empty() {
        telescope = dark.clone();
    }
    Pools { active, dark, telescope }
}

fn at(t: f64) -> SimTime {
    SimTime::from_secs_f64(t)
}

/// Generates the workload. Identical `(spec, net, seed)` give identical output.
pub fn generate_workload(spec: &WorkloadSpec, net: &NetworkConfig, seed: u64) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = pools(net, spec.active_hosts as usize);
    let whitelist = whitelist_entries(spec);
    let gaps = Exp::new(spec.flow_rate).expect("validated");
    let mix = &spec.proto_mix;
    let mix_total = mix.tcp + mix.udp + mix.icmp;

    let mut packets: Vec<(SimTime, u64, PacketRecord)> = Vec::new();
    let mut flows = Vec::new();
    let mut order = 0u64;
    let mut push = |packets: &mut Vec<(SimTime, u64, PacketRecord)>, p: PacketRecord| {
        packets.push((p.ts, order, p));
        order += 1;
    };

    let mut t = gaps.sample(&mut rng);
    let mut id = 0usize;
    while t < spec.duration {
        let whitelisted = !whitelist.is_empty() && rng.random_bool(spec.whitelist_fraction);
        let incoming = !whitelisted && rng.random_bool(spec.incoming_fraction);
        let answered = whitelisted || rng.random_bool(spec.answered_fraction);
        let r = rng.random::<f64>() * mix_total;
        let proto = if whitelisted || r < mix.tcp {
            6
        } else if r < mix.tcp + mix.udp {
            17
        } else {
            1
        };

        // Endpoints: (internal, external) sides, then oriented by direction.
        let internal_ip = if whitelisted || answered || !incoming {
            pools.active[rng.random_range(0..pools.active.len())]
        } else if rng.random_bool(spec.telescope_fraction) {
            pools.telescope[rng.random_range(0..pools.telescope.len())]
        } else {
            pools.dark[rng.random_range(0..pools.dark.len())]
        };
        let server_port = spec.server_ports[rng.random_range(0..spec.server_ports.len())];
        let ephemeral: u16 = rng.random_range(1024..=65535);
        let (int_ep, ext_ep) = if spec.unique_endpoints {
            // Flow ids map to distinct (host, port) pairs on both sides.
            let pool = if incoming && !answered {
                if pools.telescope.contains(&internal_ip) {
                    &pools.telescope
                } else {
                    &pools.dark
                }
            } else {
                &pools.active
            };
            let port = 1024 + (id % 64_512) as u16;
            let host = pool[(id / 64_512) % pool.len()];
            ((host, port), (Ipv4Addr::from(EXTERNAL_BASE + id as u32), server_port))
        } else if whitelisted {
            ((internal_ip, ephemeral), whitelist[rng.random_range(0..whitelist.len())])
        } else {
            let ext = Ipv4Addr::from(EXTERNAL_BASE + rng.random_range(0..spec.external_hosts));
            if incoming {
                ((internal_ip, server_port), (ext, ephemeral))
            } else {
                ((internal_ip, ephemeral), (ext, server_port))
            }
        };
        let ((ini_ip, ini_port), (res_ip, res_port)) = if incoming { (ext_ep, int_ep) } else { (int_ep, ext_ep) };
        let icmp_id = if spec.unique_endpoints { int_ep.1 } else { ephemeral };

        let request = |ts: f64, seq: u16| -> PacketRecord {
            let b = match proto {
                6 => PacketBuilder::tcp(ini_ip, ini_port, res_ip, res_port, TcpFlags::SYN).seq(0x1000_0000 + id as u32),
                17 => PacketBuilder::udp(ini_ip, ini_port, res_ip, res_port).payload_len(spec.payload_len as usize),
                _ => {
                    PacketBuilder::icmp_echo(ini_ip, res_ip, true, icmp_id, seq).payload_len(spec.payload_len as usize)
                }
            };
            b.at(at(ts)).build()
        };

        let first = request(t, 0);
        let key = make_flow_key(&first);
        push(&mut packets, first.clone());
        let mut requests = 1;
        let delay_s = if answered {
            let d = if incoming { &spec.incoming_delay } else { &spec.outgoing_delay };
            Some(d.sample(&mut rng).max(0.0))
        } else {
            None
        };
        if rng.random_bool(spec.duplicate_probability) && spec.max_duplicates > 0 {
            let k = rng.random_range(1..=spec.max_duplicates);
            for j in 1..=k {
                let ts = t + spec.retransmit_gap * f64::from(j);
                // Retransmissions stop once the answer is in.
                if delay_s.is_some_and(|d| ts >= t + d) {
                    break;
                }
                push(&mut packets, request(ts, j as u16));
                requests += 1;
            }
        }

        let mut icmp_error = false;
        if let Some(d) = delay_s {
            let tr = t + d;
            let resp = match proto {
                6 => PacketBuilder::tcp(res_ip, res_port, ini_ip, ini_port, TcpFlags::SYN | TcpFlags::ACK)
                    .seq(0x2000_0000 + id as u32)
                    .ack(0x1000_0001 + id as u32),
                17 => PacketBuilder::udp(res_ip, res_port, ini_ip, ini_port).payload_len(spec.payload_len as usize),
                _ => PacketBuilder::icmp_echo(res_ip, ini_ip, false, icmp_id, 0).payload_len(spec.payload_len as usize),
            };
            push(&mut packets, resp.at(at(tr)).build());
            let n = if spec.followup_max > 0 { rng.random_range(spec.followup_min..=spec.followup_max) } else { 0 };
            for j in 0..n {
                let ts = tr + spec.followup_start + spec.followup_gap * f64::from(j);
                let forward = j % 2 == 0;
                let (s, sp, dd, dp) =
                    if forward { (ini_ip, ini_port, res_ip, res_port) } else { (res_ip, res_port, ini_ip, ini_port) };
                let b = match proto {
                    6 => PacketBuilder::tcp(s, sp, dd, dp, TcpFlags::ACK | TcpFlags::PSH)
                        .payload_len(spec.payload_len as usize),
                    17 => PacketBuilder::udp(s, sp, dd, dp).payload_len(spec.payload_len as usize),
                    _ => PacketBuilder::icmp_echo(s, dd, forward, icmp_id, j as u16 + 1)
                        .payload_len(spec.payload_len as usize),
                };
                push(&mut packets, b.at(at(ts)).build());
            }
        } else if proto == 17 && rng.random_bool(spec.icmp_error_fraction) {
            icmp_error = true;
            let d = if incoming { &spec.incoming_delay } else { &spec.outgoing_delay };
            let ts = t + d.sample(&mut rng).max(0.0);
            push(&mut packets, PacketBuilder::icmp_error(res_ip, 3, 3, &first).at(at(ts)).build());
        }

        flows.push(FlowTruth {
            id,
            key,
            t0: at(t),
            proto,
            incoming,
            answered,
            whitelisted,
            delay: delay_s.map(|d| at(t + d).since(at(t))),
            icmp_error,
            requests,
        });
        id += 1;
        t += gaps.sample(&mut rng);
    }
    packets.sort_by_key(|(ts, o, _)| (*ts, *o));
    Ok(Workload { packets: packets.into_iter().map(|(_, _, p)| p).collect(), flows, whitelist })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> NetworkConfig {
        NetworkConfig::default()
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = WorkloadSpec { duration: 2.0, ..Default::default() };
        let a = generate_workload(&spec, &net(), 7).unwrap();
        let b = generate_workload(&spec, &net(), 7).unwrap();
        let c = generate_workload(&spec, &net(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.packets, c.packets);
        assert!(a.packets.windows(2).all(|w| w[0].ts <= w[1].ts));
    }

    #[test]
    fn flow_rate_roughly_respected() {
        let spec = WorkloadSpec { duration: 10.0, flow_rate: 500.0, ..Default::default() };
        let w = generate_workload(&spec, &net(), 1).unwrap();
        assert!((4500..5500).contains(&w.flows.len()), "{}", w.flows.len());
    }

    #[test]
    fn unanswered_means_single_direction() {
        let spec = WorkloadSpec {
            answered_fraction: 0.0,
            icmp_error_fraction: 0.0,
            duplicate_probability: 0.0,
            ..Default::default()
        };
        let w = generate_workload(&spec, &net(), 3).unwrap();
        assert_eq!(w.packets.len(), w.flows.len());
        assert!(w.flows.iter().all(|f| !f.answered && f.delay.is_none()));
    }

    #[test]
    fn unique_endpoints_never_repeat() {
        let spec = WorkloadSpec { unique_endpoints: true, flow_rate: 2000.0, ..Default::default() };
        let w = generate_workload(&spec, &net(), 5).unwrap();
        let keys: std::collections::HashSet<_> = w.flows.iter().map(|f| f.key).collect();
        assert_eq!(keys.len(), w.flows.len());
        let mut eps = std::collections::HashSet::new();
        for f in &w.flows {
            assert!(eps.insert(f.key.ep_lo) && eps.insert(f.key.ep_hi), "endpoint reused in flow {}", f.id);
        }
    }

    #[test]
    fn whitelist_share() {
        let spec = WorkloadSpec { whitelist_fraction: 0.3, flow_rate: 1000.0, ..Default::default() };
        let w = generate_workload(&spec, &net(), 9).unwrap();
        let share = w.flows.iter().filter(|f| f.whitelisted).count() as f64 / w.flows.len() as f64;
        assert!((share - 0.3).abs() < 0.03, "{share}");
        assert_eq!(w.whitelist.len(), 400);
    }

    #[test]
    fn mixture_delay_mass() {
        let d = DelayDist::Mixture {
            components: vec![
                MixtureComponent { weight: 0.75, dist: DelayDist::Fixed { value: 0.001 } },
                MixtureComponent { weight: 0.25, dist: DelayDist::Fixed { value: 2.0 } },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let late = (0..10_000).filter(|_| d.sample(&mut rng) > 1.0).count();
        assert!((2300..2700).contains(&late), "{late}");
    }

    #[test]
    fn parses_from_toml() {
        let spec: WorkloadSpec = toml::from_str(
            "duration = 3.0\nincoming_delay = { kind = \"uniform\", low = 0.0, high = 0.5 }\nproto_mix = { tcp = 1.0, udp = 0.0, icmp = 0.0 }\n",
        )
        .unwrap();
        assert_eq!(spec.duration, 3.0);
        assert_eq!(spec.incoming_delay, DelayDist::Uniform { low: 0.0, high: 0.5 });
        assert!(toml::from_str::<WorkloadSpec>("bogus = 1\n").is_err());
        let bad = WorkloadSpec { answered_fraction: 1.5, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().field, "answered_fraction");
    }
}
