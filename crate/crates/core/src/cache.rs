//! Two-tier chunk-granular KV-cache bookkeeping.
//!
//! The cache tracks *placement* only: which device or host slot holds each
//! chunk of each conversation. Evicted device slots are not returned to the
//! free list; they enter a reclaimable set and are handed out again (LIFO,
//! ahead of never-used slots) only when a later allocation needs them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ChunkId, ConvId, Slot};

pub const DEFAULT_CHUNK_SIZE: u64 = 32;

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("insufficient device memory: need {needed} slots, {available} available")]
    InsufficientDeviceMemory { needed: usize, available: usize },
    #[error("insufficient host memory: need {needed} slots, {available} available")]
    InsufficientHostMemory { needed: usize, available: usize },
    #[error("unknown conversation {0}")]
    UnknownConversation(ConvId),
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),
    #[error("chunk {chunk} is {actual}, expected {expected}")]
    WrongLocation {
        chunk: ChunkId,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("duplicate chunk {0} in request")]
    DuplicateChunk(ChunkId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Device(Slot),
    Host(Slot),
    Dropped,
}

impl Location {
    fn name(&self) -> &'static str {
        match self {
            Location::Device(_) => "device",
            Location::Host(_) => "host",
            Location::Dropped => "dropped",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Location::Dropped => 0,
            Location::Host(_) => 1,
            Location::Device(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: ChunkId,
    pub conv_id: ConvId,
    pub start_offset: u64,
    pub n_tokens: u64,
    pub location: Location,
    /// Simulation clock, seconds.
    pub last_active: f64,
}

impl ChunkRecord {
    /// Context length the chunk attends to, including itself.
    pub fn context_end(&self) -> u64 {
        self.start_offset + self.n_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Dropped: raw tokens must be refetched and recomputed.
    Recompute,
    /// Host resident: must be copied back to the device.
    SwapIn,
    /// Device resident.
    Resident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub chunks: Vec<ChunkId>,
    pub start: u64,
    pub end: u64,
}

impl Segment {
    pub fn tokens(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextLayout {
    pub conv_id: ConvId,
    pub segments: Vec<Segment>,
    pub total_context_tokens: u64,
}

impl ContextLayout {
    pub fn tokens_of(&self, kind: SegmentKind) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .map(Segment::tokens)
            .sum()
    }

    pub fn chunks_of(&self, kind: SegmentKind) -> Vec<ChunkId> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .flat_map(|s| s.chunks.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Device,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictTarget {
    Host,
    Dropped,
}

/// Slot accounting for one tier.
#[derive(Debug, Clone)]
pub struct TierState {
    capacity: usize,
    free: Vec<Slot>,
    allocated: BTreeMap<ChunkId, Slot>,
    /// `(slot, chunk that last lived there)`, consumed from the back.
    reclaimable: Vec<(Slot, ChunkId)>,
}

impl TierState {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            free: (0..capacity).rev().collect(),
            allocated: BTreeMap::new(),
            reclaimable: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_slots(&self) -> usize {
        self.allocated.len()
    }

    pub fn reclaimable_slots(&self) -> usize {
        self.reclaimable.len()
    }

    /// Free plus reclaimable.
    pub fn available(&self) -> usize {
        self.free.len() + self.reclaimable.len()
    }

    fn take(&mut self, chunk: ChunkId) -> Slot {
        let slot = match self.reclaimable.pop() {
            Some((slot, _)) => slot,
            None => self.free.pop().expect("caller checked availability"),
        };
        self.allocated.insert(chunk, slot);
        slot
    }

    fn evict(&mut self, chunk: ChunkId, lazy: bool) {
        let slot = self
            .allocated
            .remove(&chunk)
            .expect("chunk allocated in this tier");
        if lazy {
            self.reclaimable.push((slot, chunk));
        } else {
            self.free.push(slot);
        }
    }
}

/// Device and host tiers plus per-conversation chunk lists.
#[derive(Debug, Clone)]
pub struct PagedKvCache {
    chunk_size: u64,
    device: TierState,
    host: TierState,
    chunks: BTreeMap<ChunkId, ChunkRecord>,
    convs: BTreeMap<ConvId, Vec<ChunkId>>,
    next_chunk: u64,
}

impl PagedKvCache {
    pub fn new(chunk_size: u64, device_slots: usize, host_slots: usize) -> Self {
        assert!(chunk_size >= 1, "chunk size must be positive");
        Self {
            chunk_size,
            device: TierState::new(device_slots),
            host: TierState::new(host_slots),
            chunks: BTreeMap::new(),
            convs: BTreeMap::new(),
            next_chunk: 0,
        }
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk_size
    }

    pub fn device(&self) -> &TierState {
        &self.device
    }

    pub fn host(&self) -> &TierState {
        &self.host
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&ChunkRecord> {
        self.chunks.get(&id)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.chunks.values()
    }

    pub fn conversations(&self) -> impl Iterator<Item = ConvId> + '_ {
        self.convs.keys().copied()
    }

    pub fn has_conversation(&self, conv: ConvId) -> bool {
        self.convs.contains_key(&conv)
    }

    /// Registers a conversation with no chunks; a no-op if it already exists.
    pub fn ensure_conversation(&mut self, conv: ConvId) {
        self.convs.entry(conv).or_default();
    }

    pub fn conversation_chunks(&self, conv: ConvId) -> Result<&[ChunkId], CacheError> {
        self.convs
            .get(&conv)
            .map(Vec::as_slice)
            .ok_or(CacheError::UnknownConversation(conv))
    }

    pub fn total_tokens(&self, conv: ConvId) -> u64 {
        self.convs
            .get(&conv)
            .and_then(|c| c.last())
            .map(|id| self.chunks[id].context_end())
            .unwrap_or(0)
    }

    /// New device slots an append of `n_new` tokens would consume, assuming
    /// the conversation's trailing chunk is device resident by then.
    pub fn slots_for_append(&self, conv: ConvId, n_new: u64) -> usize {
        let room = self
            .convs
            .get(&conv)
            .and_then(|c| c.last())
            .map(|id| self.chunk_size - self.chunks[id].n_tokens)
            .unwrap_or(0);
        n_new.saturating_sub(room).div_ceil(self.chunk_size) as usize
    }

    /// Appends `n_new_tokens` to the conversation, filling its partial
    /// trailing chunk first. Returns the newly created chunks.
    pub fn allocate(
        &mut self,
        conv: ConvId,
        n_new_tokens: u64,
        now: f64,
    ) -> Result<Vec<ChunkId>, CacheError> {
        self.ensure_conversation(conv);
        let needed = self.slots_for_append(conv, n_new_tokens);
        if needed > self.device.available() {
            return Err(CacheError::InsufficientDeviceMemory {
                needed,
                available: self.device.available(),
            });
        }
        let mut remaining = n_new_tokens;
        if let Some(&last) = self.convs[&conv].last() {
            let rec = &self.chunks[&last];
            let room = self.chunk_size - rec.n_tokens;
            if room > 0 && remaining > 0 {
                if !matches!(rec.location, Location::Device(_)) {
                    return Err(CacheError::WrongLocation {
                        chunk: last,
                        expected: "device",
                        actual: rec.location.name(),
                    });
                }
                let rec = self.chunks.get_mut(&last).expect("present");
                let add = room.min(remaining);
                rec.n_tokens += add;
                rec.last_active = now;
                remaining -= add;
            }
        }
        let mut created = Vec::with_capacity(needed);
        let mut offset = self.total_tokens(conv);
        while remaining > 0 {
            let n = remaining.min(self.chunk_size);
            let id = ChunkId(self.next_chunk);
            self.next_chunk += 1;
            let slot = self.device.take(id);
            self.chunks.insert(
                id,
                ChunkRecord {
                    chunk_id: id,
                    conv_id: conv,
                    start_offset: offset,
                    n_tokens: n,
                    location: Location::Device(slot),
                    last_active: now,
                },
            );
            self.convs.get_mut(&conv).expect("registered").push(id);
            created.push(id);
            offset += n;
            remaining -= n;
        }
        Ok(created)
    }

    pub fn layout(&self, conv: ConvId) -> Result<ContextLayout, CacheError> {
        let ids = self.conversation_chunks(conv)?;
        let mut segments: Vec<Segment> = Vec::new();
        for id in ids {
            let rec = &self.chunks[id];
            let kind = match rec.location {
                Location::Dropped => SegmentKind::Recompute,
                Location::Host(_) => SegmentKind::SwapIn,
                Location::Device(_) => SegmentKind::Resident,
            };
            match segments.last_mut() {
                Some(seg) if seg.kind == kind => {
                    seg.chunks.push(*id);
                    seg.end = rec.context_end();
                }
                _ => segments.push(Segment {
                    kind,
                    chunks: vec![*id],
                    start: rec.start_offset,
                    end: rec.context_end(),
                }),
            }
        }
        Ok(ContextLayout {
            conv_id: conv,
            segments,
            total_context_tokens: self.total_tokens(conv),
        })
    }

    fn check_unique(ids: &[ChunkId]) -> Result<(), CacheError> {
        let mut seen = std::collections::BTreeSet::new();
        for id in ids {
            if !seen.insert(*id) {
                return Err(CacheError::DuplicateChunk(*id));
            }
        }
        Ok(())
    }

    fn record(&self, id: ChunkId) -> Result<&ChunkRecord, CacheError> {
        self.chunks.get(&id).ok_or(CacheError::UnknownChunk(id))
    }

    /// Moves device chunks to the host, or drops device/host chunks.
    /// Either every victim moves or none does.
    pub fn apply_evictions(
        &mut self,
        victims: &[ChunkId],
        target: EvictTarget,
    ) -> Result<(), CacheError> {
        Self::check_unique(victims)?;
        for id in victims {
            let rec = self.record(*id)?;
            let ok = match target {
                EvictTarget::Host => matches!(rec.location, Location::Device(_)),
                EvictTarget::Dropped => !matches!(rec.location, Location::Dropped),
            };
            if !ok {
                return Err(CacheError::WrongLocation {
                    chunk: *id,
                    expected: if target == EvictTarget::Host {
                        "device"
                    } else {
                        "device or host"
                    },
                    actual: rec.location.name(),
                });
            }
        }
        if target == EvictTarget::Host && victims.len() > self.host.free_slots() {
            return Err(CacheError::InsufficientHostMemory {
                needed: victims.len(),
                available: self.host.free_slots(),
            });
        }
        for id in victims {
            let loc = self.chunks[id].location;
            let new_loc = match (loc, target) {
                (Location::Device(_), EvictTarget::Host) => {
                    self.device.evict(*id, true);
                    Location::Host(self.host.take(*id))
                }
                (Location::Device(_), EvictTarget::Dropped) => {
                    self.device.evict(*id, true);
                    Location::Dropped
                }
                (Location::Host(_), EvictTarget::Dropped) => {
                    self.host.evict(*id, false);
                    Location::Dropped
                }
                _ => unreachable!("validated above"),
            };
            self.chunks.get_mut(id).expect("present").location = new_loc;
        }
        Ok(())
    }

    fn assign_device(
        &mut self,
        ids: &[ChunkId],
        expect_host: bool,
    ) -> Result<Vec<(ChunkId, Slot)>, CacheError> {
        Self::check_unique(ids)?;
        for id in ids {
            let rec = self.record(*id)?;
            let ok = if expect_host {
                matches!(rec.location, Location::Host(_))
            } else {
                rec.location == Location::Dropped
            };
            if !ok {
                return Err(CacheError::WrongLocation {
                    chunk: *id,
                    expected: if expect_host { "host" } else { "dropped" },
                    actual: rec.location.name(),
                });
            }
        }
        if ids.len() > self.device.available() {
            return Err(CacheError::InsufficientDeviceMemory {
                needed: ids.len(),
                available: self.device.available(),
            });
        }
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if expect_host {
                self.host.evict(*id, false);
            }
            let slot = self.device.take(*id);
            self.chunks.get_mut(id).expect("present").location = Location::Device(slot);
            out.push((*id, slot));
        }
        Ok(out)
    }

    /// Assigns device slots to host-resident chunks being swapped in.
    pub fn restore(&mut self, ids: &[ChunkId]) -> Result<Vec<(ChunkId, Slot)>, CacheError> {
        self.assign_device(ids, true)
    }

    /// Assigns device slots to dropped chunks that the next batch recomputes.
    pub fn recompute_into_device(
        &mut self,
        ids: &[ChunkId],
    ) -> Result<Vec<(ChunkId, Slot)>, CacheError> {
        self.assign_device(ids, false)
    }

    /// Marks every chunk of the conversation active at `now`.
    pub fn touch(&mut self, conv: ConvId, now: f64) {
        if let Some(ids) = self.convs.get(&conv) {
            for id in ids {
                self.chunks.get_mut(id).expect("present").last_active = now;
            }
        }
    }

    /// Keeps a finished request's chunks cached, stamped with the finish time.
    pub fn retain_on_finish(&mut self, conv: ConvId, now: f64) {
        self.touch(conv, now);
    }

    /// Frees every chunk of the conversation; the stateless baseline calls
    /// this when a request finishes.
    pub fn release_conversation(&mut self, conv: ConvId) {
        let Some(ids) = self.convs.get_mut(&conv) else {
            return;
        };
        let ids = std::mem::take(ids);
        for id in ids {
            let rec = self.chunks.remove(&id).expect("present");
            match rec.location {
                Location::Device(_) => self.device.evict(id, false),
                Location::Host(_) => self.host.evict(id, false),
                Location::Dropped => {}
            }
        }
    }

    /// Device slots for positions `0..total_tokens`; every chunk must be
    /// device resident.
    pub fn block_table(&self, conv: ConvId) -> Result<Vec<Slot>, CacheError> {
        self.conversation_chunks(conv)?
            .iter()
            .map(|id| match self.chunks[id].location {
                Location::Device(slot) => Ok(slot),
                other => Err(CacheError::WrongLocation {
                    chunk: *id,
                    expected: "device",
                    actual: other.name(),
                }),
            })
            .collect()
    }

    /// True when the conversation's chunks are ordered Dropped* Host* Device*.
    pub fn location_order_ok(&self, conv: ConvId) -> bool {
        self.convs
            .get(&conv)
            .map(|ids| {
                ids.windows(2).all(|w| {
                    self.chunks[&w[0]].location.rank() <= self.chunks[&w[1]].location.rank()
                })
            })
            .unwrap_or(true)
    }

    /// Checks slot conservation, single residency and chunk tiling.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, tier) in [("device", &self.device), ("host", &self.host)] {
            let sum = tier.free.len() + tier.allocated.len() + tier.reclaimable.len();
            if sum != tier.capacity {
                return Err(format!(
                    "{name}: free {} + allocated {} + reclaimable {} != capacity {}",
                    tier.free.len(),
                    tier.allocated.len(),
                    tier.reclaimable.len(),
                    tier.capacity
                ));
            }
            let mut seen = vec![false; tier.capacity];
            let slots = tier
                .free
                .iter()
                .chain(tier.allocated.values())
                .chain(tier.reclaimable.iter().map(|(s, _)| s));
            for &s in slots {
                if s >= tier.capacity || seen[s] {
                    return Err(format!("{name}: slot {s} duplicated or out of range"));
                }
                seen[s] = true;
            }
        }
        for (id, rec) in &self.chunks {
            let d = self.device.allocated.get(id);
            let h = self.host.allocated.get(id);
            let ok = match rec.location {
                Location::Device(s) => d == Some(&s) && h.is_none(),
                Location::Host(s) => h == Some(&s) && d.is_none(),
                Location::Dropped => d.is_none() && h.is_none(),
            };
            if !ok {
                return Err(format!("chunk {id}: location disagrees with tier maps"));
            }
        }
        if self.device.allocated.len() + self.host.allocated.len()
            > self.chunks.len()
        {
            return Err("tier maps reference unknown chunks".into());
        }
        for (conv, ids) in &self.convs {
            let mut offset = 0;
            for (i, id) in ids.iter().enumerate() {
                let rec = &self.chunks[id];
                if rec.conv_id != *conv || rec.start_offset != offset {
                    return Err(format!("conv {conv}: chunk {id} offset mismatch"));
                }
                if rec.n_tokens == 0 || rec.n_tokens > self.chunk_size {
                    return Err(format!("conv {conv}: chunk {id} bad size"));
                }
                if rec.n_tokens < self.chunk_size && i + 1 != ids.len() {
                    return Err(format!("conv {conv}: partial chunk {id} not last"));
                }
                offset += rec.n_tokens;
            }
        }
        Ok(())
    }

    /// One line per chunk: `chunk_id conv_id offset location last_active`.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for rec in self.chunks.values() {
            let loc = match rec.location {
                Location::Device(s) => format!("device:{s}"),
                Location::Host(s) => format!("host:{s}"),
                Location::Dropped => "dropped".to_string(),
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                rec.chunk_id, rec.conv_id, rec.start_offset, loc, rec.last_active
            );
        }
        out
    }
}
