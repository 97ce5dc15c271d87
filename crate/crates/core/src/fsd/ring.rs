//! Fixed-capacity descriptor ring addressed by absolute sequence numbers.

use super::table::FlowHandle;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub t_arr: SimTime,
    /// `None` once the flow was answered or the packet collected early.
    pub flow: Option<FlowHandle>,
    pub slot: Option<u32>,
}

impl Descriptor {
    pub fn is_null(&self) -> bool {
        self.flow.is_none()
    }
}

#[derive(Debug)]
pub struct DescriptorRing {
    items: Vec<Option<Descriptor>>,
    head: u64,
    tail: u64,
}

impl DescriptorRing {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring needs at least one slot");
        Self { items: vec![None; capacity], head: 0, tail: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.items.len()
    }

    pub fn len(&self) -> usize {
        (self.tail - self.head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.items.len()
    }

    fn pos(&self, seq: u64) -> usize {
        (seq % self.items.len() as u64) as usize
    }

    /// Appends at the tail; returns the sequence number, or `None` when full.
    pub fn push(&mut self, d: Descriptor) -> Option<u64> {
        if self.is_full() {
            return None;
        }
        debug_assert!(self.back().is_none_or(|b| b.t_arr <= d.t_arr), "arrival times must not decrease");
        let seq = self.tail;
        let p = self.pos(seq);
        self.items[p] = Some(d);
        self.tail += 1;
        Some(seq)
    }

    pub fn front(&self) -> Option<&Descriptor> {
        if self.is_empty() {
            return None;
        }
        self.items[self.pos(self.head)].as_ref()
    }

    fn back(&self) -> Option<&Descriptor> {
        if self.is_empty() {
            return None;
        }
        self.items[self.pos(self.tail - 1)].as_ref()
    }

    pub fn pop(&mut self) -> Option<Descriptor> {
        if self.is_empty() {
            return None;
        }
        let p = self.pos(self.head);
        self.head += 1;
        self.items[p].take()
    }

    pub fn get_mut(&mut self, seq: u64) -> Option<&mut Descriptor> {
        if seq < self.head || seq >= self.tail {
            return None;
        }
        let p = self.pos(seq);
        self.items[p].as_mut()
    }

    /// Descriptors from head to tail.
    pub fn iter(&self) -> impl Iterator<Item = &Descriptor> {
        (self.head..self.tail).filter_map(move |s| self.items[self.pos(s)].as_ref())
    }
}
