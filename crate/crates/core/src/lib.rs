//! Erroneous-traffic monitoring pipeline.
//!
//! A switch model with static and dynamic filters mirrors unmatched packets,
//! anonymized, to a flow-state detection engine. Flows answered in time become
//! switch rules through a batching controller; the rest reach the collector.
//! Everything runs on a virtual clock.

pub mod analytics;
pub mod anonymizer;
pub mod collector;
pub mod config;
pub mod control;
pub mod experiments;
pub mod flow;
pub mod fsd;
pub mod ingest;
pub mod net;
pub mod packet;
pub mod queue;
pub mod switch;
pub mod time;
