//! Packet buffer: fixed number of slots with a free list.

use crate::anonymizer::MirroredPacket;

#[derive(Debug)]
pub struct PacketBuffer {
    slots: Vec<Option<MirroredPacket>>,
    free: Vec<u32>,
    frees: u64,
}

impl PacketBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { slots: (0..capacity).map(|_| None).collect(), free: (0..capacity as u32).rev().collect(), frees: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn used(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    /// Stores a packet; hands it back when no slot is free.
    pub fn store(&mut self, pkt: MirroredPacket) -> Result<u32, MirroredPacket> {
        match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = Some(pkt);
                Ok(i)
            }
            None => Err(pkt),
        }
    }

    pub fn get(&self, slot: u32) -> Option<&MirroredPacket> {
        self.slots.get(slot as usize)?.as_ref()
    }

    /// Releases a slot and returns its packet.
    ///
    /// # Panics
    /// On a double free.
    pub fn take(&mut self, slot: u32) -> MirroredPacket {
        let pkt = self.slots[slot as usize].take().expect("buffer slot released twice");
        self.free.push(slot);
        self.frees += 1;
        pkt
    }

    pub fn total_frees(&self) -> u64 {
        self.frees
    }
}
