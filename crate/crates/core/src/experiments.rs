//! Parameter sweeps run entirely in virtual time.
//!
//! `batch_sweep` and `queue_stability` drive the controller against a channel
//! that only charges the latency model. `timer_sweep`, `dt_sweep` and
//! `filter_efficiency` replay generated workloads through the whole pipeline.
//!
//! Processing times come from a single-server model of the engine: every
//! packet and every timer check occupies the server for a fixed cost, checks
//! also pay per examined descriptor, and work queues in time order. A check
//! runs at every multiple of the check period, including the ones the replay
//! skipped because they would examine nothing.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::time::Duration;

use crate::anonymizer::deobfuscate_ip;
use crate::collector::{Direction, DstLiveness, ErroneousRecord, VecSink};
use crate::config::{AnonKey, LatencyModel, PipelineConfig};
use crate::control::{ChannelError, Controller, RuleOp, SouthboundChannel};
use crate::flow::{make_flow_key, FlowKey};
use crate::ingest::replay::{nearest_rank, Pipeline, ReplayOptions, RunOutput, TimingTrace};
use crate::ingest::workload::{generate_workload, Workload, WorkloadError, WorkloadSpec};
use crate::packet::PacketRecord;
use crate::switch::{InstallReport, MatRule, RuleKey};
use crate::time::{duration_nanos, SimTime};

/// A southbound channel that applies nothing and charges the latency model.
#[derive(Debug, Clone, Copy)]
pub struct ModelChannel(pub LatencyModel);

impl SouthboundChannel for ModelChannel {
    fn install(&mut self, rules: Vec<MatRule>, _now: SimTime) -> Result<InstallReport, ChannelError> {
        let n = rules.len();
        Ok(InstallReport { installed: n, rejected: 0, latency: self.0.call_latency(n), rejected_keys: Vec::new() })
    }

    fn delete(&mut self, keys: &[RuleKey], _now: SimTime) -> Result<(usize, Duration), ChannelError> {
        Ok((keys.len(), self.0.call_latency(keys.len())))
    }
}

fn synthetic_rule(i: u64) -> MatRule {
    let ip = Ipv4Addr::from(0x1400_0000u32.wrapping_add(i as u32));
    MatRule::pair(ip, 443, 6, Duration::from_secs(30))[0].clone()
}

/// Queue length over a constant-rate stream of install requests.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueTrace {
    pub k: usize,
    /// `(time, pending ops)` after every `sample_every` arrivals.
    pub samples: Vec<(SimTime, usize)>,
    pub high_watermark: usize,
    pub final_len: usize,
    pub rounds: u64,
}

impl QueueTrace {
    /// Every sample at least as long as the previous one, and the last one longer than the first.
    pub fn monotonically_growing(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].1 >= w[0].1)
            && self.samples.first().zip(self.samples.last()).is_some_and(|(a, b)| b.1 > a.1)
    }
}

/// Offers `ops` installs at `rate` per second to a controller with batch
/// size `k` and lets it drain with the given latency model.
pub fn queue_stability(k: usize, model: LatencyModel, rate: f64, ops: u64, sample_every: u64) -> QueueTrace {
    let cfg = PipelineConfig::default();
    let mut control = Controller::new(std::sync::Arc::new(cfg.network.clone()), &cfg.control).with_k_batch(k);
    let mut channel = ModelChannel(model);
    let mut trace = QueueTrace { k, samples: Vec::new(), high_watermark: 0, final_len: 0, rounds: 0 };
    let gap = 1e9 / rate;
    let mut i = 0u64;
    let mut now = SimTime::ZERO;
    loop {
        let t_arr = (i < ops).then(|| SimTime::from_nanos((i as f64 * gap).round() as u64));
        let t_ctl = (!control.queue().is_empty()).then(|| control.busy_until().max(now));
        let arrival_first = match (t_arr, t_ctl) {
            (None, None) => break,
            (Some(a), c) => c.is_none_or(|c| a <= c),
            (None, Some(_)) => false,
        };
        if arrival_first {
            now = t_arr.expect("checked");
            control.enqueue(RuleOp::Install(synthetic_rule(i)));
            i += 1;
            if i.is_multiple_of(sample_every.max(1)) {
                trace.samples.push((now, control.queue().len()));
            }
            if i == ops {
                trace.final_len = control.queue().len();
            }
        } else {
            now = t_ctl.expect("checked");
            control.drain_and_apply(now, &mut channel);
            trace.rounds += 1;
        }
    }
    trace.high_watermark = control.queue().high_watermark();
    trace
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPoint {
    pub k: usize,
    /// Seconds per rule for one full install call.
    pub per_rule_install: f64,
    pub per_rule_delete: f64,
    pub speedup_vs_single: f64,
    pub queue_high_watermark: usize,
    pub queue_final: usize,
}

/// Per-rule install and delete cost for each batch size, measured through
/// the controller, plus queue behaviour at `rate` installs per second.
pub fn batch_sweep(ks: &[usize], model: LatencyModel, rate: f64, ops: u64) -> Vec<BatchPoint> {
    let cfg = PipelineConfig::default();
    let per_rule = |k: usize| {
        let mut control = Controller::new(std::sync::Arc::new(cfg.network.clone()), &cfg.control).with_k_batch(k);
        let mut ch = ModelChannel(model);
        let rules: Vec<MatRule> = (0..k as u64).map(synthetic_rule).collect();
        let keys: Vec<RuleKey> = rules.iter().map(|r| r.key).collect();
        control.enqueue_installs(rules);
        let ins = control.drain_and_apply(SimTime::ZERO, &mut ch);
        for key in keys {
            control.enqueue(RuleOp::Delete(key));
        }
        let del = control.drain_and_apply(ins.completes_at, &mut ch);
        (ins.per_rule_latency(), del.per_rule_latency())
    };
    let single = per_rule(1).0;
    ks.iter()
        .map(|&k| {
            let (ins, del) = per_rule(k);
            let q = queue_stability(k, model, rate, ops, ops.max(1));
            BatchPoint {
                k,
                per_rule_install: ins,
                per_rule_delete: del,
                speedup_vs_single: single / ins,
                queue_high_watermark: q.high_watermark,
                queue_final: q.final_len,
            }
        })
        .collect()
}

pub fn batch_csv(points: &[BatchPoint]) -> String {
    let mut s = String::from("k,per_rule_install,per_rule_delete,speedup,queue_high_watermark,queue_final\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.3},{},{}",
            p.k, p.per_rule_install, p.per_rule_delete, p.speedup_vs_single, p.queue_high_watermark, p.queue_final
        );
    }
    s
}

/// Costs of the engine's single-server model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub per_packet: Duration,
    pub per_check: Duration,
    pub per_descriptor: Duration,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_packet: Duration::from_micros(2),
            per_check: Duration::from_nanos(500),
            per_descriptor: Duration::from_nanos(200),
        }
    }
}

/// Time from arrival to end of processing for every engine packet.
pub fn processing_times(timing: &TimingTrace, p_d: Duration, cost: CostModel) -> Vec<Duration> {
    let p = duration_nanos(p_d).max(1);
    let c_pkt = duration_nanos(cost.per_packet);
    let c_chk = duration_nanos(cost.per_check);
    let c_desc = duration_nanos(cost.per_descriptor);
    let skip_ok = c_chk <= p;
    let mut busy = 0u64;
    // Next grid point whose check has not been accounted for.
    let mut next_grid = 0u64;
    let mut checks = timing.checks.iter().peekable();
    let mut out = Vec::with_capacity(timing.arrivals.len());
    for &a in &timing.arrivals {
        let t = a.as_nanos();
        // Checks due at the arrival instant run after it.
        while next_grid < t {
            let g = next_grid;
            let mut work = c_chk;
            while let Some(&&(ct, examined)) = checks.peek() {
                if ct.as_nanos() > g {
                    break;
                }
                if ct.as_nanos() == g {
                    work += c_desc * examined as u64;
                }
                checks.next();
            }
            busy = busy.max(g) + work;
            next_grid = g + p;
            if skip_ok && busy <= next_grid {
                // Idle checks up to the next real one finish within their own period.
                let limit = checks.peek().map_or(t, |c| c.0.as_nanos().min(t));
                if limit > next_grid {
                    let g_last = (limit - 1) / p * p;
                    busy = busy.max(g_last + c_chk);
                    next_grid = g_last + p;
                }
            }
        }
        busy = busy.max(t) + c_pkt;
        out.push(Duration::from_nanos(busy - t));
    }
    out
}

fn quantiles(mut v: Vec<Duration>) -> [Duration; 3] {
    v.sort_unstable();
    [0.75, 0.95, 0.99].map(|q| nearest_rank(&v, q).unwrap_or_default())
}

/// Generates the workload and replays it with the workload's whitelist.
pub fn run_workload(
    cfg: &PipelineConfig,
    spec: &WorkloadSpec,
    seed: u64,
    opts: ReplayOptions,
) -> Result<(Workload, RunOutput), WorkloadError> {
    let w = generate_workload(spec, &cfg.network, seed)?;
    let mut p = Pipeline::new(cfg.clone(), Box::new(VecSink::default()))
        .map_err(|e| WorkloadError { field: "config".into(), msg: e.to_string() })?
        .with_options(opts);
    if !w.whitelist.is_empty() {
        p.set_whitelist(w.whitelist.clone());
    }
    let out = p.run(w.packets.clone());
    Ok((w, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimerPoint {
    pub p_d: Duration,
    pub d_max: usize,
    pub checks: usize,
    pub buffering: [Duration; 3],
    pub processing: [Duration; 3],
}

/// Replays one workload for each `(p_d, d_max)` pair.
pub fn timer_sweep(
    cfg: &PipelineConfig,
    spec: &WorkloadSpec,
    seed: u64,
    points: &[(Duration, usize)],
    cost: CostModel,
) -> Result<Vec<TimerPoint>, WorkloadError> {
    let mut out = Vec::new();
    for &(p_d, d_max) in points {
        let mut c = cfg.clone();
        c.network.timers.p_d = p_d;
        c.network.timers.d_max = d_max;
        let (_, run) = run_workload(&c, spec, seed, ReplayOptions { timing_trace: true, ..Default::default() })?;
        out.push(TimerPoint {
            p_d,
            d_max,
            checks: run.timing.checks.len(),
            buffering: quantiles(run.buffering.clone()),
            processing: quantiles(processing_times(&run.timing, p_d, cost)),
        });
    }
    Ok(out)
}

pub fn timer_csv(points: &[TimerPoint]) -> String {
    let mut s = String::from(
        "p_d,d_max,checks,buffering_p75,buffering_p95,buffering_p99,processing_p75,processing_p95,processing_p99\n",
    );
    for p in points {
        let _ = write!(s, "{:.6},{},{}", p.p_d.as_secs_f64(), p.d_max, p.checks);
        for d in p.buffering.iter().chain(&p.processing) {
            let _ = write!(s, ",{:.9}", d.as_secs_f64());
        }
        s.push('\n');
    }
    s
}

/// Rebuilds the packet with real internal addresses.
pub fn restore_addresses(rec: &ErroneousRecord, key: AnonKey) -> PacketRecord {
    let mut p = rec.pkt.clone();
    if rec.internal_host_anon {
        let src = if rec.direction == Direction::Outgoing { deobfuscate_ip(p.src_ip, key) } else { p.src_ip };
        let dst = if rec.dst_liveness != DstLiveness::External { deobfuscate_ip(p.dst_ip, key) } else { p.dst_ip };
        p.rewrite_addresses(src, dst);
    }
    p
}

/// First packets of flows that were collected, as `(flow, arrival)`.
pub fn collected_first_packets(records: &[ErroneousRecord], key: AnonKey) -> HashSet<(FlowKey, SimTime)> {
    records.iter().map(|r| (make_flow_key(&restore_addresses(r, key)), r.ts)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtPoint {
    pub dt: Duration,
    pub answered_flows: usize,
    pub misclassified: usize,
    pub misclassified_fraction: f64,
    pub erroneous_records: usize,
    pub peak_buffered: usize,
}

/// Share of answered flows whose first packet was still collected, per
/// detection timeout.
pub fn dt_sweep(
    cfg: &PipelineConfig,
    spec: &WorkloadSpec,
    seed: u64,
    dts: &[Duration],
) -> Result<Vec<DtPoint>, WorkloadError> {
    let mut out = Vec::new();
    for &dt in dts {
        let mut c = cfg.clone();
        c.network.timers.dt = dt;
        if c.network.timers.dt_impersonated >= dt {
            c.network.timers.dt_impersonated = dt / 2;
        }
        let (w, run) = run_workload(&c, spec, seed, ReplayOptions::default())?;
        let collected = collected_first_packets(&run.records, c.network.anonymization_key);
        let answered: Vec<_> = w.flows.iter().filter(|f| f.answered && !f.whitelisted).collect();
        let misclassified = answered.iter().filter(|f| collected.contains(&(f.key, f.t0))).count();
        out.push(DtPoint {
            dt,
            answered_flows: answered.len(),
            misclassified,
            misclassified_fraction: if answered.is_empty() {
                0.0
            } else {
                misclassified as f64 / answered.len() as f64
            },
            erroneous_records: run.records.len(),
            peak_buffered: run.metrics.iter().map(|m| m.buffered).max().unwrap_or(0),
        });
    }
    Ok(out)
}

pub fn dt_csv(points: &[DtPoint]) -> String {
    let mut s =
        String::from("dt,answered_flows,misclassified,misclassified_fraction,erroneous_records,peak_buffered\n");
    for p in points {
        let _ = writeln!(
            s,
            "{:.6},{},{},{:.6},{},{}",
            p.dt.as_secs_f64(),
            p.answered_flows,
            p.misclassified,
            p.misclassified_fraction,
            p.erroneous_records,
            p.peak_buffered
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterPoint {
    pub packets: u64,
    pub whitelist_drops: u64,
    pub rule_drops: u64,
    /// Share of packets dropped in the switch.
    pub efficiency: f64,
    pub whitelist_share: f64,
    /// Share of packets reaching the engine.
    pub reaching_engine: f64,
}

pub fn filter_efficiency(cfg: &PipelineConfig, spec: &WorkloadSpec, seed: u64) -> Result<FilterPoint, WorkloadError> {
    let (_, run) = run_workload(cfg, spec, seed, ReplayOptions::default())?;
    let s = &run.summary;
    Ok(FilterPoint {
        packets: s.packets,
        whitelist_drops: s.whitelist_drops,
        rule_drops: s.rule_drops,
        efficiency: s.filtering_efficiency,
        whitelist_share: s.whitelist_share,
        reaching_engine: if s.packets == 0 { 0.0 } else { s.mirrored as f64 / s.packets as f64 },
    })
}

pub fn filter_csv(p: &FilterPoint) -> String {
    format!(
        "packets,whitelist_drops,rule_drops,efficiency,whitelist_share,reaching_engine\n{},{},{},{:.6},{:.6},{:.6}\n",
        p.packets, p.whitelist_drops, p.rule_drops, p.efficiency, p.whitelist_share, p.reaching_engine
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_rule_cost_is_u_shaped() {
        let pts = batch_sweep(&[1, 200, 1000, 10_000], LatencyModel::default(), 100.0, 100);
        assert!(pts[1].per_rule_install * 10.0 <= pts[0].per_rule_install);
        assert!(pts[2].per_rule_install < pts[1].per_rule_install);
        assert!(pts[3].per_rule_install > pts[2].per_rule_install);
        assert!((pts[0].speedup_vs_single - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_batches_fall_behind() {
        let slow = queue_stability(1, LatencyModel::default(), 2000.0, 20_000, 1000);
        assert!(slow.monotonically_growing());
        let fast = queue_stability(200, LatencyModel::default(), 2000.0, 20_000, 1000);
        assert!(fast.high_watermark < 2000, "{}", fast.high_watermark);
    }

    fn brute_force(timing: &TimingTrace, p_d: Duration, cost: CostModel, horizon: u64) -> Vec<Duration> {
        // Every grid point in turn, then each arrival.
        let p = duration_nanos(p_d);
        let mut events: Vec<(u64, u8, u64)> = Vec::new();
        let mut g = 0;
        while g <= horizon {
            let examined: usize = timing.checks.iter().filter(|c| c.0.as_nanos() == g).map(|c| c.1).sum();
            events.push((g, 1, duration_nanos(cost.per_check) + duration_nanos(cost.per_descriptor) * examined as u64));
            g += p;
        }
        for a in &timing.arrivals {
            events.push((a.as_nanos(), 0, duration_nanos(cost.per_packet)));
        }
        events.sort();
        let mut busy = 0;
        let mut out = Vec::new();
        for (t, kind, work) in events {
            busy = u64::max(busy, t) + work;
            if kind == 0 {
                out.push(Duration::from_nanos(busy - t));
            }
        }
        out
    }

    #[test]
    fn processing_model_matches_step_through() {
        let p_d = Duration::from_micros(10);
        let timing = TimingTrace {
            arrivals: [3, 5, 5, 20, 21, 90, 400, 401, 402, 1000].iter().map(|&u| SimTime::from_micros(u)).collect(),
            checks: vec![
                (SimTime::from_micros(20), 40),
                (SimTime::from_micros(400), 3),
                (SimTime::from_micros(410), 100),
            ],
        };
        for cost in [
            CostModel::default(),
            CostModel {
                per_packet: Duration::from_micros(7),
                per_check: Duration::from_micros(6),
                per_descriptor: Duration::from_nanos(900),
            },
            CostModel {
                per_packet: Duration::from_micros(1),
                per_check: Duration::from_micros(12),
                per_descriptor: Duration::ZERO,
            },
        ] {
            assert_eq!(processing_times(&timing, p_d, cost), brute_force(&timing, p_d, cost, 1_000_000), "{cost:?}");
        }
    }
}
