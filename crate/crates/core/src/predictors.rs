//! Prediction and forwarding structures: PHT, BTB, RSB and the store-bypass policy.
//!
//! All of this is microarchitectural state. The pipeline never restores it
//! on a squash.

use serde::{Deserialize, Serialize};

/// Counter value a fresh PHT entry starts at (weakly not-taken).
pub const PHT_INIT: u8 = 1;
const PHT_MAX: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Taken,
    NotTaken,
}

impl Direction {
    pub fn from_taken(taken: bool) -> Direction {
        if taken {
            Direction::Taken
        } else {
            Direction::NotTaken
        }
    }

    pub fn is_taken(self) -> bool {
        self == Direction::Taken
    }
}

/// Pattern history table of 2-bit saturating counters, indexed by the low
/// bits of the branch's instruction index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pht {
    counters: Vec<u8>,
}

impl Pht {
    /// `size` is rounded up to a power of two.
    pub fn new(size: usize) -> Pht {
        Pht { counters: vec![PHT_INIT; size.max(1).next_power_of_two()] }
    }

    fn slot(&self, site: usize) -> usize {
        site & (self.counters.len() - 1)
    }

    pub fn size(&self) -> usize {
        self.counters.len()
    }

    pub fn counter(&self, site: usize) -> u8 {
        self.counters[self.slot(site)]
    }

    pub fn predict(&self, site: usize) -> Direction {
        Direction::from_taken(self.counter(site) >= 2)
    }

    pub fn update(&mut self, site: usize, outcome: Direction) {
        let i = self.slot(site);
        let c = &mut self.counters[i];
        *c = match outcome {
            Direction::Taken => (*c + 1).min(PHT_MAX),
            Direction::NotTaken => c.saturating_sub(1),
        };
    }

    pub fn counters(&self) -> &[u8] {
        &self.counters
    }
}

impl Default for Pht {
    fn default() -> Self {
        Pht::new(1024)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct BtbEntry {
    tag: usize,
    target: usize,
    valid: bool,
}

/// Direct-mapped branch target buffer with full-tag match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Btb {
    entries: Vec<BtbEntry>,
}

impl Btb {
    /// `entries` is rounded up to a power of two.
    pub fn new(entries: usize) -> Btb {
        Btb { entries: vec![BtbEntry::default(); entries.max(1).next_power_of_two()] }
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    fn split(&self, site: usize) -> (usize, usize) {
        let n = self.entries.len();
        (site & (n - 1), site / n)
    }

    pub fn predict(&self, site: usize) -> Option<usize> {
        let (i, tag) = self.split(site);
        let e = self.entries[i];
        (e.valid && e.tag == tag).then_some(e.target)
    }

    pub fn update(&mut self, site: usize, target: usize) {
        let (i, tag) = self.split(site);
        self.entries[i] = BtbEntry { tag, target, valid: true };
    }
}

impl Default for Btb {
    fn default() -> Self {
        Btb::new(256)
    }
}

/// Circular return stack buffer. Pushing onto a full stack overwrites the
/// oldest entry; popping an empty stack yields no prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rsb {
    slots: Vec<usize>,
    top: usize,
    len: usize,
}

impl Rsb {
    pub fn new(depth: usize) -> Rsb {
        Rsb { slots: vec![0; depth], top: 0, len: 0 }
    }

    pub fn depth(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, ret: usize) {
        let depth = self.slots.len();
        if depth == 0 {
            return;
        }
        self.slots[self.top] = ret;
        self.top = (self.top + 1) % depth;
        self.len = (self.len + 1).min(depth);
    }

    pub fn pop(&mut self) -> Option<usize> {
        if self.len == 0 {
            return None;
        }
        let depth = self.slots.len();
        self.top = (self.top + depth - 1) % depth;
        self.len -= 1;
        Some(self.slots[self.top])
    }
}

impl Default for Rsb {
    fn default() -> Self {
        Rsb::new(16)
    }
}

/// Whether younger loads may speculatively bypass older stores whose
/// address is still unresolved. Turning it off is the SSBD analog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreBypassPolicy {
    pub enabled: bool,
}

impl Default for StoreBypassPolicy {
    fn default() -> Self {
        StoreBypassPolicy { enabled: true }
    }
}
