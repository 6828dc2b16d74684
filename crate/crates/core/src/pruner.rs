//! Streaming top-K neighbor selection over a bounded min-heap.
//!
//! A retention domain keeps the `K` strongest coefficients seen so far with
//! the weakest at the root. A new coefficient that does not beat the root is
//! discarded on the spot, so ties at the boundary go to the earlier entry.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionEntry {
    pub coeff: f32,
    pub vertex: u32,
}

impl RetentionEntry {
    pub fn new(coeff: f32, vertex: u32) -> Self {
        Self { coeff, vertex }
    }
}

/// What happened to an offered entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Offer {
    /// Inserted into a domain that still had room; carries sift-up swaps.
    Pushed { swaps: u32 },
    /// Beat the root and took its place.
    Replaced { evicted: RetentionEntry, swaps: u32 },
    /// Did not beat the root.
    Discarded,
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    entry: RetentionEntry,
    seq: u64,
}

impl Slot {
    /// Heap order: lower coefficient first, and among equal coefficients the
    /// later arrival first, so it is the one evicted.
    fn below(&self, other: &Slot) -> bool {
        match self.entry.coeff.partial_cmp(&other.entry.coeff) {
            Some(Ordering::Less) => true,
            Some(Ordering::Greater) => false,
            _ => self.seq > other.seq,
        }
    }
}

/// Array-backed binary min-heap with capacity `K`.
#[derive(Clone, Debug)]
pub struct RetentionDomain {
    slots: Vec<Slot>,
    capacity: usize,
    next_seq: u64,
}

impl RetentionDomain {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            bail!(Contract, "retention domain capacity must be at least 1");
        }
        Ok(Self {
            slots: Vec::with_capacity(capacity),
            capacity,
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn root(&self) -> Option<RetentionEntry> {
        self.slots.first().map(|s| s.entry)
    }

    /// Entries in heap-array order.
    pub fn entries(&self) -> impl Iterator<Item = RetentionEntry> + '_ {
        self.slots.iter().map(|s| s.entry)
    }

    /// Entries sorted by vertex id.
    pub fn into_sorted_by_vertex(self) -> Vec<RetentionEntry> {
        let mut v: Vec<RetentionEntry> = self.slots.into_iter().map(|s| s.entry).collect();
        v.sort_by_key(|e| e.vertex);
        v
    }

    fn check(e: &RetentionEntry) -> Result<()> {
        if !e.coeff.is_finite() {
            bail!(Validation, "non-finite coefficient {} for vertex {}", e.coeff, e.vertex);
        }
        Ok(())
    }

    fn slot(&mut self, entry: RetentionEntry) -> Slot {
        let seq = self.next_seq;
        self.next_seq += 1;
        Slot { entry, seq }
    }

    /// Inserts into a non-full domain, returning the number of sift-up swaps.
    pub fn push(&mut self, e: RetentionEntry) -> Result<u32> {
        Self::check(&e)?;
        if self.is_full() {
            bail!(Contract, "push into a full retention domain (K = {})", self.capacity);
        }
        let s = self.slot(e);
        self.slots.push(s);
        let mut i = self.slots.len() - 1;
        let mut swaps = 0;
        while i > 0 {
            let parent = (i - 1) / 2;
            if self.slots[i].below(&self.slots[parent]) {
                self.slots.swap(i, parent);
                i = parent;
                swaps += 1;
            } else {
                break;
            }
        }
        Ok(swaps)
    }

    /// Replaces the root of a full domain with a strictly larger coefficient
    /// and sifts down. Returns the evicted root and the swap levels taken.
    pub fn replace_root(&mut self, e: RetentionEntry) -> Result<(RetentionEntry, u32)> {
        Self::check(&e)?;
        if !self.is_full() {
            bail!(Contract, "replace_root on a domain that is not full");
        }
        let root = self.slots[0].entry;
        if e.coeff <= root.coeff {
            bail!(
                Contract,
                "coefficient {} does not exceed the root {}; it must be discarded",
                e.coeff,
                root.coeff
            );
        }
        self.slots[0] = self.slot(e);
        let n = self.slots.len();
        let mut i = 0;
        let mut swaps = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut m = i;
            if l < n && self.slots[l].below(&self.slots[m]) {
                m = l;
            }
            if r < n && self.slots[r].below(&self.slots[m]) {
                m = r;
            }
            if m == i {
                break;
            }
            self.slots.swap(i, m);
            i = m;
            swaps += 1;
        }
        Ok((root, swaps))
    }

    /// Push, replace or discard as the streaming rule dictates.
    pub fn offer(&mut self, e: RetentionEntry) -> Result<Offer> {
        Self::check(&e)?;
        if !self.is_full() {
            return Ok(Offer::Pushed { swaps: self.push(e)? });
        }
        if e.coeff > self.slots[0].entry.coeff {
            let (evicted, swaps) = self.replace_root(e)?;
            Ok(Offer::Replaced { evicted, swaps })
        } else {
            Ok(Offer::Discarded)
        }
    }

    /// Full scan of the heap property over coefficients.
    pub fn heap_property_holds(&self) -> bool {
        (1..self.slots.len()).all(|i| self.slots[(i - 1) / 2].entry.coeff <= self.slots[i].entry.coeff)
    }
}

/// `⌈log₂ K⌉`, the worst-case sift-down depth of a `K`-entry domain.
pub fn swap_bound(k: usize) -> u32 {
    if k <= 1 {
        0
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

/// Streams `entries` through one retention domain of capacity `k`.
/// The result is sorted by vertex id.
pub fn prune_neighbors<I>(entries: I, k: usize) -> Result<Vec<RetentionEntry>>
where
    I: IntoIterator<Item = RetentionEntry>,
{
    let mut rd = RetentionDomain::new(k)?;
    for e in entries {
        rd.offer(e)?;
    }
    Ok(rd.into_sorted_by_vertex())
}

/// Stable descending sort, first `min(n, k)` entries. Sorted by vertex id.
pub fn oracle_topk(entries: &[RetentionEntry], k: usize) -> Result<Vec<RetentionEntry>> {
    if k == 0 {
        bail!(Contract, "top-K with K = 0");
    }
    if let Some(e) = entries.iter().find(|e| !e.coeff.is_finite()) {
        bail!(Validation, "non-finite coefficient {} for vertex {}", e.coeff, e.vertex);
    }
    let mut v = entries.to_vec();
    v.sort_by(|a, b| b.coeff.partial_cmp(&a.coeff).unwrap_or(Ordering::Equal));
    v.truncate(k);
    v.sort_by_key(|e| e.vertex);
    Ok(v)
}
