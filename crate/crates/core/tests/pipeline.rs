//! Replay-level properties checked against the event log and run outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use errmon_core::collector::{DstLiveness, VecSink};
use errmon_core::config::{PipelineConfig, ServiceEndpoint};
use errmon_core::experiments::restore_addresses;
use errmon_core::ingest::replay::{Pipeline, ReplayOptions, RunOutput};
use errmon_core::ingest::workload::{generate_workload, WorkloadSpec};
use errmon_core::packet::{PacketBuilder, PacketRecord, TcpFlags};
use errmon_core::time::SimTime;

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

fn run(cfg: &PipelineConfig, trace: Vec<PacketRecord>) -> RunOutput {
    Pipeline::new(cfg.clone(), Box::new(VecSink::default()))
        .unwrap()
        .with_options(ReplayOptions { event_log: true, ..Default::default() })
        .run(trace)
}

fn event_time(line: &str) -> SimTime {
    let t: f64 = line.split(' ').next().unwrap().parse().unwrap();
    SimTime::from_secs_f64(t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn clock_never_runs_backwards(seed in any::<u64>(), answered in 0.0f64..1.0, store in any::<bool>()) {
        let spec = WorkloadSpec { duration: 2.0, flow_rate: 300.0, answered_fraction: answered, followup_max: 3, ..Default::default() };
        let mut cfg = PipelineConfig::default();
        cfg.fsd.store_duplicates = store;
        cfg.network.timers.rule_ttl = Duration::from_secs(1);
        cfg.replay.metrics_interval = Duration::from_millis(250);
        let w = generate_workload(&spec, &cfg.network, seed).unwrap();
        let out = run(&cfg, w.packets);
        prop_assert!(out.summary.invariant_failures.is_empty(), "{:?}", out.summary.invariant_failures);
        let times: Vec<SimTime> = out.events.iter().map(|l| event_time(l)).collect();
        prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(out.metrics.windows(2).all(|w| w[0].ts <= w[1].ts));
    }
}

#[test]
fn liveness_tags_follow_recent_outgoing_traffic() {
    let spec = WorkloadSpec {
        duration: 20.0,
        flow_rate: 40.0,
        answered_fraction: 0.0,
        incoming_fraction: 0.6,
        active_hosts: 6,
        ..Default::default()
    };
    let mut cfg = PipelineConfig::default();
    cfg.network.timers.t_alive = Duration::from_secs(2);
    let w = generate_workload(&spec, &cfg.network, 5).unwrap();
    let sent: Vec<(Ipv4Addr, SimTime)> =
        w.packets.iter().filter(|p| cfg.network.is_internal(p.src_ip)).map(|p| (p.src_ip, p.ts)).collect();
    let out = run(&cfg, w.packets.clone());
    let collected: Vec<SimTime> =
        out.events.iter().filter(|l| l.contains(" collect ")).map(|l| event_time(l)).collect();
    assert_eq!(collected.len(), out.records.len());
    let (mut alive, mut dark) = (0, 0);
    for (rec, &t) in out.records.iter().zip(&collected) {
        if rec.dst_liveness == DstLiveness::External {
            continue;
        }
        let host = restore_addresses(rec, cfg.network.anonymization_key).dst_ip;
        let expected = sent.iter().any(|&(h, s)| h == host && s <= t && t.since(s) <= cfg.network.timers.t_alive);
        assert_eq!(rec.dst_liveness == DstLiveness::Alive, expected, "{host} at {t}");
        if expected {
            alive += 1;
        } else {
            dark += 1;
        }
    }
    assert!(alive > 0 && dark > 0, "alive={alive} dark={dark}");
}

#[test]
fn every_installed_sync_is_closed_by_one_delete() {
    let spec = WorkloadSpec {
        duration: 30.0,
        flow_rate: 15.0,
        answered_fraction: 0.9,
        incoming_fraction: 0.8,
        active_hosts: 100,
        followup_max: 3,
        ..Default::default()
    };
    let mut cfg = PipelineConfig::default();
    cfg.network.timers.rule_ttl = Duration::from_secs(2);
    let w = generate_workload(&spec, &cfg.network, 9).unwrap();
    let out = run(&cfg, w.packets);
    let mut state: BTreeMap<Ipv4Addr, bool> = BTreeMap::new();
    let (mut installs, mut deletes) = (0, 0);
    for line in out.events.iter().filter(|l| l.contains(" sync ")) {
        let mut it = line.split(' ').skip(2);
        let host: Ipv4Addr = it.next().unwrap().parse().unwrap();
        let installed = state.entry(host).or_insert(false);
        match it.next().unwrap() {
            "Installed" => {
                assert!(!*installed, "{line}");
                *installed = true;
                installs += 1;
            }
            "Deleted" => {
                assert!(*installed, "{line}");
                *installed = false;
                deletes += 1;
            }
            other => panic!("unknown sync {other}"),
        }
    }
    assert!(installs > 0 && deletes > 0, "installs={installs} deletes={deletes}");
}

#[test]
fn responder_serves_only_impersonated_endpoints() {
    let service = ServiceEndpoint { ip: ip("10.0.0.9"), port: 23, proto: 6 };
    let mut cfg = PipelineConfig::default();
    cfg.network.impersonation = BTreeSet::from([service]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut trace = Vec::new();
    for i in 0..50u32 {
        let src = Ipv4Addr::from(0xc633_6400 + i);
        let t = SimTime::from_millis(rng.random_range(0..5000));
        let dst = if i % 5 == 0 { (ip("10.0.0.9"), 22) } else { (service.ip, service.port) };
        trace.push(PacketBuilder::tcp(src, 40000, dst.0, dst.1, TcpFlags::SYN).seq(i).at(t).build());
    }
    trace.sort_by_key(|p| p.ts);
    let out = run(&cfg, trace);
    let replies: Vec<&String> = out.events.iter().filter(|l| l.contains(" reply ")).collect();
    assert!(replies.iter().all(|l| l.contains(" 10.0.0.9:23>")), "{replies:?}");
    let synacks = replies.iter().filter(|l| l.ends_with(" SA")).count();
    let resets = replies.iter().filter(|l| l.ends_with(" AR")).count();
    assert_eq!((synacks, resets), (40, 40));
    assert_eq!(out.transcripts.len(), 40);
    assert!(out.transcripts.iter().all(|t| t.payload == b"GET / HTTP/1.0\r\n\r\n" && t.local.port == 23));
    let remotes: BTreeSet<_> = out.transcripts.iter().map(|t| t.remote).collect();
    assert_eq!(remotes.len(), 40);
}

#[test]
fn live_descriptors_stay_near_rate_times_timeout() {
    for rate in [200.0, 800.0, 2000.0] {
        let spec = WorkloadSpec {
            duration: 6.0,
            flow_rate: rate,
            answered_fraction: 0.0,
            duplicate_probability: 0.0,
            icmp_error_fraction: 0.0,
            ..Default::default()
        };
        let mut cfg = PipelineConfig::default();
        cfg.replay.metrics_interval = Duration::from_millis(100);
        let w = generate_workload(&spec, &cfg.network, 4).unwrap();
        let out = run(&cfg, w.packets);
        let peak = out.metrics.iter().map(|m| m.ring_len).max().unwrap();
        let bound = rate * cfg.network.timers.dt.as_secs_f64() * 1.2 + 100.0;
        assert!((peak as f64) <= bound, "rate {rate}: peak {peak} > {bound}");
        assert!((peak as f64) >= rate * 0.7, "rate {rate}: peak {peak} too low to be steady state");
    }
}

#[test]
fn pipeline_refuses_invalid_config() {
    let mut cfg = PipelineConfig::default();
    cfg.network.timers.alpha_ht = 0.0;
    assert!(Pipeline::new(cfg, Box::new(VecSink::default())).is_err());
}

#[test]
fn empty_trace_yields_empty_outputs() {
    let out = run(&PipelineConfig::default(), Vec::new());
    assert!(out.records.is_empty());
    assert!(out.transcripts.is_empty());
    assert!(out.events.is_empty());
    assert_eq!(out.summary.packets, 0);
    assert_eq!(out.summary.erroneous, 0);
}
