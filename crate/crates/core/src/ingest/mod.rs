//! Trace input, synthetic workloads and the replay scheduler.

pub mod pcap;
pub mod replay;
pub mod workload;
