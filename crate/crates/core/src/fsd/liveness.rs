//! Per-host liveness: two bitmaps over the internal address space, each bit
//! with the time it was last refreshed.

use std::net::Ipv4Addr;
use std::time::Duration;

use crate::net::PrefixSet;
use crate::time::SimTime;

/// Largest internal address space the bitmaps will allocate for.
pub const MAX_TRACKED_ADDRESSES: u64 = 1 << 24;

#[derive(Debug, Clone)]
struct Bitmap {
    bits: Vec<u64>,
    refreshed: Vec<SimTime>,
}

impl Bitmap {
    fn new(n: usize) -> Self {
        Self { bits: vec![0; n.div_ceil(64)], refreshed: vec![SimTime::ZERO; n] }
    }

    fn set(&mut self, i: usize, now: SimTime) {
        self.bits[i / 64] |= 1 << (i % 64);
        self.refreshed[i] = now;
    }

    fn clear(&mut self, i: usize) {
        self.bits[i / 64] &= !(1 << (i % 64));
    }

    fn fresh(&self, i: usize, now: SimTime, t_alive: Duration) -> bool {
        self.bits[i / 64] & (1 << (i % 64)) != 0 && now.since(self.refreshed[i]) <= t_alive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{0} is not an internal address")]
pub struct NotInternal(pub Ipv4Addr);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleSyncEvent {
    Installed,
    Deleted,
}

#[derive(Debug, Clone)]
pub struct Liveness {
    space: PrefixSet,
    t_alive: Duration,
    nf_seen: Bitmap,
    rule_active: Bitmap,
}

impl Liveness {
    /// # Panics
    /// If the internal space exceeds [`MAX_TRACKED_ADDRESSES`].
    pub fn new(space: PrefixSet, t_alive: Duration) -> Self {
        let n = space.address_count();
        assert!(n <= MAX_TRACKED_ADDRESSES, "internal space of {n} addresses is too large to track");
        let n = n as usize;
        Self { space, t_alive, nf_seen: Bitmap::new(n), rule_active: Bitmap::new(n) }
    }

    fn index(&self, ip: Ipv4Addr) -> Result<usize, NotInternal> {
        self.space.index_of(ip).map(|i| i as usize).ok_or(NotInternal(ip))
    }

    /// The host sent traffic seen by the engine.
    pub fn mark_seen(&mut self, ip: Ipv4Addr, now: SimTime) {
        if let Ok(i) = self.index(ip) {
            self.nf_seen.set(i, now);
        }
    }

    pub fn rule_sync(&mut self, ip: Ipv4Addr, event: RuleSyncEvent, now: SimTime) {
        if let Ok(i) = self.index(ip) {
            match event {
                RuleSyncEvent::Installed => self.rule_active.set(i, now),
                RuleSyncEvent::Deleted => self.rule_active.clear(i),
            }
        }
    }

    pub fn is_alive(&self, ip: Ipv4Addr, now: SimTime) -> Result<bool, NotInternal> {
        let i = self.index(ip)?;
        Ok(self.nf_seen.fresh(i, now, self.t_alive) || self.rule_active.fresh(i, now, self.t_alive))
    }
}
