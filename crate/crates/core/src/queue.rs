//! Bounded FIFO used at every cross-context boundary.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crossbeam_queue::ArrayQueue;

/// Lock-free bounded FIFO that remembers its high watermark.
///
/// Producers and consumers may live in different threads; the replay harness
/// drives them from one thread in a fixed order.
#[derive(Debug)]
pub struct BoundedQueue<T> {
    inner: ArrayQueue<T>,
    high_watermark: AtomicUsize,
    rejected: AtomicU64,
}

impl<T> BoundedQueue<T> {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        Self { inner: ArrayQueue::new(capacity), high_watermark: AtomicUsize::new(0), rejected: AtomicU64::new(0) }
    }

    /// Hands the item back when the queue is full.
    pub fn push(&self, item: T) -> Result<(), T> {
        match self.inner.push(item) {
            Ok(()) => {
                self.high_watermark.fetch_max(self.inner.len(), Ordering::Relaxed);
                Ok(())
            }
            Err(item) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                Err(item)
            }
        }
    }

    pub fn pop(&self) -> Option<T> {
        self.inner.pop()
    }

    /// Pops up to `max` items.
    pub fn drain_up_to(&self, max: usize) -> Vec<T> {
        let mut out = Vec::new();
        while out.len() < max {
            match self.inner.pop() {
                Some(x) => out.push(x),
                None => break,
            }
        }
        out
    }

    pub fn drain(&self) -> Vec<T> {
        self.drain_up_to(usize::MAX)
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    pub fn high_watermark(&self) -> usize {
        self.high_watermark.load(Ordering::Relaxed)
    }

    /// Pushes refused because the queue was full.
    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }
}
