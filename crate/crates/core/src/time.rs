//! Virtual time.
//!
//! Every component runs against a discrete-event clock measured in integer
//! nanoseconds. Nothing in the pipeline reads the wall clock, so a replay is
//! exactly reproducible and experiments spanning minutes of traffic finish in
//! seconds.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::time::Duration;

/// An instant on the virtual timeline, in nanoseconds since the start of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond. Negative and NaN inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if s.is_nan() || s <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((s * 1e9).round() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }

    /// Smallest multiple of `period` that is `>= self`.
    pub fn align_up(self, period: Duration) -> SimTime {
        let p = duration_nanos(period).max(1);
        SimTime(self.0.div_ceil(p) * p)
    }

    /// Smallest multiple of `period` strictly greater than `self`.
    pub fn next_multiple(self, period: Duration) -> SimTime {
        let p = duration_nanos(period).max(1);
        SimTime((self.0 / p + 1) * p)
    }
}

/// Saturating conversion of a [`Duration`] to whole nanoseconds.
pub fn duration_nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

impl Add<Duration> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Duration) -> SimTime {
        SimTime(self.0.saturating_add(duration_nanos(rhs)))
    }
}

impl AddAssign<Duration> for SimTime {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = Duration;

    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("clock moved backwards: now {now}, requested {requested}")]
pub struct ClockRegression {
    pub now: SimTime,
    pub requested: SimTime,
}

/// Monotone virtual clock owned by the replay scheduler.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: SimTime,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn advance_to(&mut self, t: SimTime) -> Result<SimTime, ClockRegression> {
        if t < self.now {
            return Err(ClockRegression { now: self.now, requested: t });
        }
        self.now = t;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secs_roundtrip() {
        let t = SimTime::from_secs_f64(1.000_000_001);
        assert_eq!(t.as_nanos(), 1_000_000_001);
        assert_eq!(t.to_string(), "1.000000001");
        assert_eq!(SimTime::from_secs_f64(-3.0), SimTime::ZERO);
    }

    #[test]
    fn alignment() {
        let p = Duration::from_micros(100);
        assert_eq!(SimTime::from_micros(250).align_up(p), SimTime::from_micros(300));
        assert_eq!(SimTime::from_micros(300).align_up(p), SimTime::from_micros(300));
        assert_eq!(SimTime::from_micros(300).next_multiple(p), SimTime::from_micros(400));
    }

    #[test]
    fn clock_refuses_to_go_back() {
        let mut c = VirtualClock::new();
        c.advance_to(SimTime::from_secs(2)).unwrap();
        assert!(c.advance_to(SimTime::from_secs(1)).is_err());
        assert_eq!(c.now(), SimTime::from_secs(2));
    }
}
