//! IPv4 prefixes and prefix sets.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PrefixError {
    #[error("missing '/' in prefix {0:?}")]
    MissingLength(String),
    #[error("bad address in prefix {0:?}")]
    BadAddress(String),
    #[error("bad prefix length in {0:?} (expected 0..=32)")]
    BadLength(String),
    #[error("prefix {0:?} has host bits set")]
    HostBitsSet(String),
}

/// A CIDR block such as `10.0.0.0/24`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Prefix {
    network: u32,
    len: u8,
}

impl Ipv4Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, PrefixError> {
        if len > 32 {
            return Err(PrefixError::BadLength(format!("{addr}/{len}")));
        }
        let network = u32::from(addr);
        if network & !mask(len) != 0 {
            return Err(PrefixError::HostBitsSet(format!("{addr}/{len}")));
        }
        Ok(Self { network, len })
    }

    pub fn network(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.network)
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// Number of addresses covered.
    pub fn size(&self) -> u64 {
        1u64 << (32 - u32::from(self.len))
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & mask(self.len) == self.network
    }

    /// True if every address of `other` is also in `self`.
    pub fn covers(&self, other: &Ipv4Prefix) -> bool {
        other.len >= self.len && self.contains(other.network())
    }

    /// The `i`-th address of the block.
    pub fn nth(&self, i: u64) -> Option<Ipv4Addr> {
        (i < self.size()).then(|| Ipv4Addr::from(self.network.wrapping_add(i as u32)))
    }
}

fn mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(len))
    }
}

impl FromStr for Ipv4Prefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (addr, len) = s.split_once('/').ok_or_else(|| PrefixError::MissingLength(s.to_string()))?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| PrefixError::BadAddress(s.to_string()))?;
        let len: u8 = len.parse().map_err(|_| PrefixError::BadLength(s.to_string()))?;
        if len > 32 {
            return Err(PrefixError::BadLength(s.to_string()));
        }
        Ipv4Prefix::new(addr, len).map_err(|_| PrefixError::HostBitsSet(s.to_string()))
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network(), self.len)
    }
}

/// An ordered list of prefixes that also assigns each covered address a
/// dense index, which the liveness bitmaps use as their bit position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixSet {
    prefixes: Vec<Ipv4Prefix>,
    offsets: Vec<u64>,
    total: u64,
}

impl PrefixSet {
    /// Overlapping prefixes are collapsed so that the dense index is unique.
    pub fn new(mut prefixes: Vec<Ipv4Prefix>) -> Self {
        prefixes.sort_by_key(|p| (p.len, p.network));
        let mut kept: Vec<Ipv4Prefix> = Vec::new();
        for p in prefixes {
            if !kept.iter().any(|k| k.covers(&p)) {
                kept.push(p);
            }
        }
        kept.sort();
        let mut offsets = Vec::with_capacity(kept.len());
        let mut total = 0;
        for p in &kept {
            offsets.push(total);
            total += p.size();
        }
        Self { prefixes: kept, offsets, total }
    }

    pub fn prefixes(&self) -> &[Ipv4Prefix] {
        &self.prefixes
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.prefixes.iter().any(|p| p.contains(ip))
    }

    /// Total number of covered addresses.
    pub fn address_count(&self) -> u64 {
        self.total
    }

    pub fn index_of(&self, ip: Ipv4Addr) -> Option<u64> {
        self.prefixes
            .iter()
            .zip(&self.offsets)
            .find(|(p, _)| p.contains(ip))
            .map(|(p, off)| off + u64::from(u32::from(ip) - u32::from(p.network())))
    }

    pub fn address_at(&self, index: u64) -> Option<Ipv4Addr> {
        let pos = self.offsets.partition_point(|&off| off <= index).checked_sub(1)?;
        self.prefixes[pos].nth(index - self.offsets[pos])
    }

    /// Every covered address is also covered by `other`.
    pub fn is_subset_of(&self, other: &PrefixSet) -> bool {
        self.prefixes.iter().all(|p| other.prefixes.iter().any(|o| o.covers(p)))
    }
}

impl FromIterator<Ipv4Prefix> for PrefixSet {
    fn from_iter<T: IntoIterator<Item = Ipv4Prefix>>(iter: T) -> Self {
        PrefixSet::new(iter.into_iter().collect())
    }
}
