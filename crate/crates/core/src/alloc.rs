//! First-fit device allocator with immediate coalescing and on-demand
//! compaction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::TensorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: u64,
    pub len: u64,
    pub requested: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    /// Enough free bytes in total, but no single extent is large enough.
    Fragmented { free: u64, largest: u64 },
    /// Not enough free bytes at all.
    OutOfMemory { free: u64, largest: u64 },
}

#[derive(Debug, Clone)]
pub struct DeviceAllocator {
    capacity: u64,
    alignment: u64,
    /// Free extents as (offset, len), sorted by offset and coalesced.
    free: Vec<(u64, u64)>,
    live: BTreeMap<TensorId, Block>,
    /// live (id, aligned len) keyed by offset
    by_offset: BTreeMap<u64, (TensorId, u64)>,
    live_requested: u64,
    live_aligned: u64,
}

impl DeviceAllocator {
    pub fn new(capacity: u64, alignment: u64) -> Self {
        assert!(alignment.is_power_of_two());
        // capacity is rounded down so every extent stays aligned
        let capacity = capacity & !(alignment - 1);
        DeviceAllocator {
            capacity,
            alignment,
            free: if capacity > 0 {
                vec![(0, capacity)]
            } else {
                vec![]
            },
            live: BTreeMap::new(),
            by_offset: BTreeMap::new(),
            live_requested: 0,
            live_aligned: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn aligned_len(&self, bytes: u64) -> u64 {
        bytes.max(1).div_ceil(self.alignment) * self.alignment
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_aligned
    }

    pub fn live_requested_bytes(&self) -> u64 {
        self.live_requested
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.live_aligned
    }

    pub fn largest_free(&self) -> u64 {
        self.free.iter().map(|&(_, l)| l).max().unwrap_or(0)
    }

    pub fn is_live(&self, id: TensorId) -> bool {
        self.live.contains_key(&id)
    }

    pub fn block(&self, id: TensorId) -> Option<Block> {
        self.live.get(&id).copied()
    }

    pub fn free_extents(&self) -> &[(u64, u64)] {
        &self.free
    }

    pub fn allocate(&mut self, id: TensorId, bytes: u64) -> Result<u64, AllocError> {
        debug_assert!(!self.live.contains_key(&id), "{id} allocated twice");
        let len = self.aligned_len(bytes);
        let Some(i) = self.free.iter().position(|&(_, l)| l >= len) else {
            let free = self.free_bytes();
            let largest = self.largest_free();
            return Err(if free >= len {
                AllocError::Fragmented { free, largest }
            } else {
                AllocError::OutOfMemory { free, largest }
            });
        };
        let (offset, extent) = self.free[i];
        if extent == len {
            self.free.remove(i);
        } else {
            self.free[i] = (offset + len, extent - len);
        }
        self.live.insert(
            id,
            Block {
                offset,
                len,
                requested: bytes,
            },
        );
        self.by_offset.insert(offset, (id, len));
        self.live_requested += bytes;
        self.live_aligned += len;
        Ok(offset)
    }

    /// Releases `id`; returns the freed block, if it was live.
    pub fn release(&mut self, id: TensorId) -> Option<Block> {
        let b = self.live.remove(&id)?;
        self.by_offset.remove(&b.offset);
        self.live_requested -= b.requested;
        self.live_aligned -= b.len;
        let i = self.free.partition_point(|&(o, _)| o < b.offset);
        self.free.insert(i, (b.offset, b.len));
        // merge with right neighbour, then left
        if i + 1 < self.free.len() && self.free[i].0 + self.free[i].1 == self.free[i + 1].0 {
            self.free[i].1 += self.free[i + 1].1;
            self.free.remove(i + 1);
        }
        if i > 0 && self.free[i - 1].0 + self.free[i - 1].1 == self.free[i].0 {
            self.free[i - 1].1 += self.free[i].1;
            self.free.remove(i);
        }
        Some(b)
    }

    /// Slides live blocks toward offset 0, lowest first, until a free extent
    /// of `bytes` exists. Returns the number of bytes moved.
    pub fn compact_for(&mut self, bytes: u64) -> u64 {
        let need = self.aligned_len(bytes);
        if self.largest_free() >= need {
            return 0;
        }
        let by_offset: Vec<(u64, TensorId)> = self
            .by_offset
            .iter()
            .map(|(&o, &(id, _))| (o, id))
            .collect();
        let mut cursor = 0;
        let mut moved = 0;
        for (k, &(offset, id)) in by_offset.iter().enumerate() {
            let blk = self.live.get_mut(&id).expect("live block");
            if offset > cursor {
                blk.offset = cursor;
                moved += blk.len;
            }
            cursor += blk.len;
            let next = by_offset.get(k + 1).map_or(self.capacity, |&(o, _)| o);
            if next - cursor >= need {
                break;
            }
        }
        self.by_offset = self
            .live
            .iter()
            .map(|(&id, b)| (b.offset, (id, b.len)))
            .collect();
        self.rebuild_free();
        moved
    }

    fn rebuild_free(&mut self) {
        self.free.clear();
        let mut cursor = 0;
        for (&o, &(_, l)) in &self.by_offset {
            if o > cursor {
                self.free.push((cursor, o - cursor));
            }
            cursor = o + l;
        }
        if cursor < self.capacity {
            self.free.push((cursor, self.capacity - cursor));
        }
    }

    /// Extents disjoint, sorted, coalesced; live + free = capacity.
    pub fn check_invariants(&self) -> Result<()> {
        if self.by_offset.len() != self.live.len() {
            return Err(Error::Allocator("offset index out of sync".into()));
        }
        let mut live = self.by_offset.iter().map(|(&o, &(_, l))| (o, l)).peekable();
        let mut free = self.free.iter().copied().peekable();
        let mut cursor = 0;
        let mut prev_free = false;
        let mut live_total = 0;
        loop {
            let (o, l, is_live) = match (live.peek(), free.peek()) {
                (Some(&a), Some(&b)) if a.0 <= b.0 => {
                    (live.next().map(|x| (x.0, x.1, true))).expect("peeked")
                }
                (_, Some(_)) => free.next().map(|x| (x.0, x.1, false)).expect("peeked"),
                (Some(_), None) => live.next().map(|x| (x.0, x.1, true)).expect("peeked"),
                (None, None) => break,
            };
            if o != cursor {
                return Err(Error::Allocator(format!(
                    "extent at {o} does not start at {cursor}"
                )));
            }
            if !is_live && prev_free {
                return Err(Error::Allocator(format!(
                    "free extent at {o} is not coalesced"
                )));
            }
            if o % self.alignment != 0 {
                return Err(Error::Allocator(format!("extent at {o} is misaligned")));
            }
            if is_live {
                live_total += l;
            }
            prev_free = !is_live;
            cursor = o + l;
        }
        if cursor != self.capacity {
            return Err(Error::Allocator(format!(
                "extents cover {cursor} of {} bytes",
                self.capacity
            )));
        }
        if live_total != self.live_aligned {
            return Err(Error::Allocator("live/free byte totals disagree".into()));
        }
        Ok(())
    }
}
