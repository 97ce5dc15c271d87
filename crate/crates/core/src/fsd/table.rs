//! Open-hashing flow table with per-bucket chains.
//!
//! Entries live in a slab; each bucket points at the head of an intrusive
//! singly linked chain through the slab. Handles carry a generation so a
//! stale handle never aliases a reused slot.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Duration;

use crate::flow::{Endpoint, FlowKey};
use crate::time::SimTime;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowHandle {
    index: u32,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowStatus {
    Suspicious,
    Benign,
}

/// Reference to a descriptor in one of the engine's rings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescRef {
    pub ring: usize,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEntry {
    pub key: FlowKey,
    pub status: FlowStatus,
    pub t_arr: SimTime,
    pub t_resp: Option<SimTime>,
    pub initiator: Endpoint,
    pub responder: Option<Endpoint>,
    /// Detection timeout that applies to this entry.
    pub dt: Duration,
    pub descriptor: Option<DescRef>,
    /// Descriptors of stored duplicates, in arrival order.
    pub duplicates: Vec<DescRef>,
}

#[derive(Debug)]
struct Slot {
    entry: Option<FlowEntry>,
    next: u32,
    generation: u32,
}

#[derive(Debug)]
pub struct FlowTable {
    buckets: Vec<u32>,
    slots: Vec<Slot>,
    free: Vec<u32>,
    seed: u64,
    len: usize,
}

impl FlowTable {
    /// # Panics
    /// If `buckets` is zero.
    pub fn new(buckets: usize, seed: u64) -> Self {
        assert!(buckets > 0, "flow table needs at least one bucket");
        Self { buckets: vec![NIL; buckets], slots: Vec::new(), free: Vec::new(), seed, len: 0 }
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bucket_of(&self, key: &FlowKey) -> usize {
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        key.hash(&mut h);
        (h.finish() % self.buckets.len() as u64) as usize
    }

    fn handle(&self, index: u32) -> FlowHandle {
        FlowHandle { index, generation: self.slots[index as usize].generation }
    }

    pub fn find(&self, key: &FlowKey) -> Option<FlowHandle> {
        let mut i = self.buckets[self.bucket_of(key)];
        while i != NIL {
            let slot = &self.slots[i as usize];
            if slot.entry.as_ref().is_some_and(|e| e.key == *key) {
                return Some(self.handle(i));
            }
            i = slot.next;
        }
        None
    }

    /// Inserts at the head of the key's chain. The caller guarantees the key
    /// is absent.
    pub fn insert(&mut self, entry: FlowEntry) -> FlowHandle {
        debug_assert!(self.find(&entry.key).is_none());
        let b = self.bucket_of(&entry.key);
        let index = match self.free.pop() {
            Some(i) => i,
            None => {
                self.slots.push(Slot { entry: None, next: NIL, generation: 0 });
                (self.slots.len() - 1) as u32
            }
        };
        let slot = &mut self.slots[index as usize];
        slot.entry = Some(entry);
        slot.next = self.buckets[b];
        self.buckets[b] = index;
        self.len += 1;
        self.handle(index)
    }

    pub fn get(&self, h: FlowHandle) -> Option<&FlowEntry> {
        let slot = self.slots.get(h.index as usize)?;
        (slot.generation == h.generation).then_some(slot.entry.as_ref()).flatten()
    }

    pub fn get_mut(&mut self, h: FlowHandle) -> Option<&mut FlowEntry> {
        let slot = self.slots.get_mut(h.index as usize)?;
        if slot.generation != h.generation {
            return None;
        }
        slot.entry.as_mut()
    }

    pub fn remove(&mut self, h: FlowHandle) -> Option<FlowEntry> {
        let key = self.get(h)?.key;
        let b = self.bucket_of(&key);
        let mut prev = NIL;
        let mut i = self.buckets[b];
        while i != NIL && i != h.index {
            prev = i;
            i = self.slots[i as usize].next;
        }
        debug_assert_eq!(i, h.index, "entry missing from its chain");
        let next = self.slots[i as usize].next;
        if prev == NIL {
            self.buckets[b] = next;
        } else {
            self.slots[prev as usize].next = next;
        }
        let slot = &mut self.slots[i as usize];
        slot.next = NIL;
        slot.generation = slot.generation.wrapping_add(1);
        self.free.push(i);
        self.len -= 1;
        slot.entry.take()
    }

    /// Removes entries of bucket `b` for which `pred` holds; returns how many.
    pub fn retain_bucket(&mut self, b: usize, mut remove_if: impl FnMut(&FlowEntry) -> bool) -> usize {
        let mut doomed = Vec::new();
        let mut i = self.buckets[b];
        while i != NIL {
            let slot = &self.slots[i as usize];
            if slot.entry.as_ref().is_some_and(&mut remove_if) {
                doomed.push(self.handle(i));
            }
            i = slot.next;
        }
        for h in &doomed {
            self.remove(*h);
        }
        doomed.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlowHandle, &FlowEntry)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| {
            s.entry.as_ref().map(|e| (FlowHandle { index: i as u32, generation: s.generation }, e))
        })
    }

    pub fn chain_len(&self, b: usize) -> usize {
        let mut n = 0;
        let mut i = self.buckets[b];
        while i != NIL {
            n += 1;
            i = self.slots[i as usize].next;
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn key(i: u32) -> FlowKey {
        FlowKey::new(Endpoint::new(Ipv4Addr::from(i), 1), Endpoint::new(Ipv4Addr::from(i + 1), 2), 6)
    }

    fn entry(i: u32) -> FlowEntry {
        FlowEntry {
            key: key(i),
            status: FlowStatus::Suspicious,
            t_arr: SimTime::ZERO,
            t_resp: None,
            initiator: Endpoint::new(Ipv4Addr::from(i), 1),
            responder: None,
            dt: Duration::from_secs(1),
            descriptor: None,
            duplicates: Vec::new(),
        }
    }

    #[test]
    fn collisions_chain_and_unlink() {
        let mut t = FlowTable::new(1, 7);
        let hs: Vec<_> = (0..5).map(|i| t.insert(entry(i * 10))).collect();
        assert_eq!(t.chain_len(0), 5);
        t.remove(hs[2]).unwrap();
        assert_eq!(t.chain_len(0), 4);
        assert!(t.find(&key(20)).is_none());
        for i in [0, 10, 30, 40] {
            assert!(t.find(&key(i)).is_some());
        }
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn stale_handles_are_rejected() {
        let mut t = FlowTable::new(8, 0);
        let h = t.insert(entry(1));
        t.remove(h);
        let h2 = t.insert(entry(2));
        assert!(t.get(h).is_none());
        assert_eq!(t.get(h2).unwrap().key, key(2));
        assert!(t.remove(h).is_none());
    }

    #[test]
    fn retain_bucket_filters() {
        let mut t = FlowTable::new(1, 0);
        for i in 0..6 {
            let h = t.insert(entry(i * 3));
            if i % 2 == 0 {
                t.get_mut(h).unwrap().status = FlowStatus::Benign;
            }
        }
        assert_eq!(t.retain_bucket(0, |e| e.status == FlowStatus::Benign), 3);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|(_, e)| e.status == FlowStatus::Suspicious));
    }

    #[test]
    fn seed_changes_placement() {
        let a = FlowTable::new(1 << 16, 1);
        let b = FlowTable::new(1 << 16, 2);
        let differ = (0..64).filter(|&i| a.bucket_of(&key(i)) != b.bucket_of(&key(i))).count();
        assert!(differ > 32);
    }
}
