//! Per-GPU unified memory pool.
//!
//! The pool is tiled by an address-ordered [`RegionList`]. Every region is
//! either free, a resident tensor, or a KV block. Adjacent free regions are
//! merged as soon as they appear, so no two free regions are ever neighbours.
//! A [`TensorMap`] indexes resident tensors by fingerprint and stays in exact
//! one-to-one correspondence with the tensor regions.
//!
//! [`ReusePool`] owns both and exposes the tensor lifecycle (lookup, load,
//! evict, move) and the KV block allocator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{ModelSpec, ModelStatsTable, TensorId, TensorSpec};
use crate::packing::{
    self, AllocationPlan, EvictionCandidate, LoadPolicy, NewTensor, PlanKind, PlanRegion,
};
use crate::{Bytes, BytesPerSecond, Seconds};

/// Physical KV block number, unique within a pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pbn(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", content = "id", rename_all = "snake_case")
)]
pub enum RegionState {
    Free,
    Tensor(TensorId),
    KvBlock(Pbn),
}

impl RegionState {
    pub fn is_free(&self) -> bool {
        matches!(self, RegionState::Free)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Region {
    pub offset: Bytes,
    pub size: Bytes,
    pub state: RegionState,
}

impl Region {
    pub fn end(&self) -> Bytes {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegionError {
    #[error("extent [{offset}, {end}) lies outside the pool")]
    OutOfBounds { offset: Bytes, end: Bytes },
    #[error("extent [{offset}, {end}) is not inside a single free region")]
    Occupied { offset: Bytes, end: Bytes },
    #[error("no region starts at offset {0}")]
    NoRegionAt(Bytes),
    #[error("region at offset {0} is already free")]
    AlreadyFree(Bytes),
    #[error("zero-sized extent")]
    ZeroSize,
}

/// Address-ordered regions tiling `[0, pool_size)` plus a size-ordered index
/// of the free ones.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionList {
    pool_size: Bytes,
    regions: BTreeMap<Bytes, (Bytes, RegionState)>,
    free_index: BTreeSet<(Bytes, Bytes)>,
    free_bytes: Bytes,
}

impl RegionList {
    pub fn new(pool_size: Bytes) -> Self {
        assert!(pool_size > 0, "pool size must be positive");
        let mut regions = BTreeMap::new();
        regions.insert(0, (pool_size, RegionState::Free));
        let mut free_index = BTreeSet::new();
        free_index.insert((pool_size, 0));
        RegionList {
            pool_size,
            regions,
            free_index,
            free_bytes: pool_size,
        }
    }

    pub fn pool_size(&self) -> Bytes {
        self.pool_size
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn free_bytes(&self) -> Bytes {
        self.free_bytes
    }

    pub fn iter(&self) -> impl Iterator<Item = Region> + '_ {
        self.regions.iter().map(|(&offset, &(size, state))| Region {
            offset,
            size,
            state,
        })
    }

    pub fn free_regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.free_index.iter().map(|&(size, offset)| Region {
            offset,
            size,
            state: RegionState::Free,
        })
    }

    pub fn get(&self, offset: Bytes) -> Option<Region> {
        self.regions.get(&offset).map(|&(size, state)| Region {
            offset,
            size,
            state,
        })
    }

    /// The region covering byte `addr`.
    pub fn containing(&self, addr: Bytes) -> Option<Region> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(&offset, &(size, state))| Region {
                offset,
                size,
                state,
            })
            .filter(|r| addr < r.end())
    }

    pub fn largest_free(&self) -> Bytes {
        self.free_index
            .iter()
            .next_back()
            .map_or(0, |&(size, _)| size)
    }

    /// Smallest free region of at least `size` bytes, lowest offset first on
    /// ties.
    pub fn best_fit(&self, size: Bytes) -> Option<Region> {
        self.free_index
            .range((size, 0)..)
            .next()
            .map(|&(size, offset)| Region {
                offset,
                size,
                state: RegionState::Free,
            })
    }

    /// Number of `block`-sized extents the free regions could host.
    pub fn block_capacity(&self, block: Bytes) -> u64 {
        self.free_index.iter().map(|&(size, _)| size / block).sum()
    }

    /// Whether `[offset, offset + size)` lies inside one free region.
    pub fn is_free_extent(&self, offset: Bytes, size: Bytes) -> bool {
        match self.containing(offset) {
            Some(r) => r.state.is_free() && offset + size <= r.end(),
            None => false,
        }
    }

    /// Marks `[offset, offset + size)` with `state`; the extent must sit
    /// inside a single free region.
    pub fn carve(
        &mut self,
        offset: Bytes,
        size: Bytes,
        state: RegionState,
    ) -> Result<(), RegionError> {
        if size == 0 {
            return Err(RegionError::ZeroSize);
        }
        let end = offset.checked_add(size).ok_or(RegionError::OutOfBounds {
            offset,
            end: Bytes::MAX,
        })?;
        if end > self.pool_size {
            return Err(RegionError::OutOfBounds { offset, end });
        }
        debug_assert!(!state.is_free());
        let host = self
            .containing(offset)
            .filter(|r| r.state.is_free() && end <= r.end())
            .ok_or(RegionError::Occupied { offset, end })?;
        self.regions.remove(&host.offset);
        self.free_index.remove(&(host.size, host.offset));
        if host.offset < offset {
            self.insert_free(host.offset, offset - host.offset);
        }
        self.regions.insert(offset, (size, state));
        if end < host.end() {
            self.insert_free(end, host.end() - end);
        }
        self.free_bytes -= size;
        Ok(())
    }

    /// Frees the allocated region starting at `offset` and coalesces it with
    /// free neighbours. Returns the released region (its former state) and
    /// the resulting free region.
    pub fn release(&mut self, offset: Bytes) -> Result<(Region, Region), RegionError> {
        let (size, state) = *self
            .regions
            .get(&offset)
            .ok_or(RegionError::NoRegionAt(offset))?;
        if state.is_free() {
            return Err(RegionError::AlreadyFree(offset));
        }
        self.regions.remove(&offset);
        self.free_bytes += size;
        let released = Region {
            offset,
            size,
            state,
        };

        let mut start = offset;
        let mut end = offset + size;
        if let Some((&prev_off, &(prev_size, prev_state))) =
            self.regions.range(..offset).next_back()
        {
            if prev_state.is_free() {
                self.regions.remove(&prev_off);
                self.free_index.remove(&(prev_size, prev_off));
                start = prev_off;
            }
        }
        if let Some(&(next_size, next_state)) = self.regions.get(&end) {
            if next_state.is_free() {
                self.regions.remove(&end);
                self.free_index.remove(&(next_size, end));
                end += next_size;
            }
        }
        self.insert_free(start, end - start);
        Ok((
            released,
            Region {
                offset: start,
                size: end - start,
                state: RegionState::Free,
            },
        ))
    }

    fn insert_free(&mut self, offset: Bytes, size: Bytes) {
        self.regions.insert(offset, (size, RegionState::Free));
        self.free_index.insert((size, offset));
    }

    /// Tiling, coalescing and free-index consistency.
    pub fn check(&self) -> Result<(), String> {
        let mut cursor = 0;
        let mut prev_free = false;
        let mut free_seen = BTreeSet::new();
        let mut free_total = 0;
        for r in self.iter() {
            if r.size == 0 {
                return Err(format!("zero-sized region at {}", r.offset));
            }
            if r.offset != cursor {
                return Err(format!(
                    "gap or overlap at {} (expected {})",
                    r.offset, cursor
                ));
            }
            let free = r.state.is_free();
            if free && prev_free {
                return Err(format!("adjacent free regions at {}", r.offset));
            }
            if free {
                free_seen.insert((r.size, r.offset));
                free_total += r.size;
            }
            prev_free = free;
            cursor = r.end();
        }
        if cursor != self.pool_size {
            return Err(format!(
                "regions end at {} but pool size is {}",
                cursor, self.pool_size
            ));
        }
        if free_seen != self.free_index {
            return Err("free index out of sync with region list".into());
        }
        if free_total != self.free_bytes {
            return Err(format!(
                "free byte counter {} != {}",
                self.free_bytes, free_total
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorEntry {
    pub offset: Bytes,
    pub size: Bytes,
    pub model_id: String,
    pub last_access: Seconds,
    /// Latency sensitivity of the owning model, kept for eviction costing.
    pub latency_sensitivity: f64,
}

/// Fingerprint-indexed table of resident tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<TensorId, TensorEntry>,
}

impl TensorMap {
    pub fn get(&self, id: &TensorId) -> Option<&TensorEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &TensorId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TensorId, &TensorEntry)> {
        self.entries.iter()
    }

    pub fn insert(&mut self, id: TensorId, entry: TensorEntry) -> Option<TensorEntry> {
        self.entries.insert(id, entry)
    }

    pub fn remove(&mut self, id: &TensorId) -> Option<TensorEntry> {
        self.entries.remove(id)
    }
}

/// Splits a model's tensors into resident hits and misses.
pub fn lookup(model: &ModelSpec, tmap: &TensorMap) -> (Vec<TensorId>, Vec<TensorSpec>) {
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for t in &model.tensors {
        if tmap.contains(&t.id) {
            hits.push(t.id);
        } else {
            misses.push(t.clone());
        }
    }
    (hits, misses)
}

/// Bytes of `model` already resident.
pub fn reuse_size(model: &ModelSpec, tmap: &TensorMap) -> Bytes {
    model
        .tensors
        .iter()
        .filter(|t| tmap.contains(&t.id))
        .map(|t| t.size)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoadOutcome {
    pub hit_tensors: Vec<TensorId>,
    pub missed_tensors: Vec<TensorSpec>,
    pub bytes_transferred: Bytes,
    pub bytes_merged: Bytes,
    pub eviction_cost_total: Seconds,
    pub plan: AllocationPlan,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoolError {
    #[error("tensor {0} is not resident")]
    NotFound(TensorId),
    #[error("tensor {0} belongs to an active instance")]
    EvictPinned(TensorId),
    #[error("tensor {0} belongs to an active instance and cannot move")]
    MovePinned(TensorId),
    #[error("move of tensor {0} overlaps its own extent")]
    OverlapMove(TensorId),
    #[error("destination [{offset}, {end}) is not free")]
    DestinationOccupied { offset: Bytes, end: Bytes },
    #[error("model {model} needs {needed} bytes but at most {available} can be made available")]
    InsufficientMemory {
        model: String,
        needed: Bytes,
        available: Bytes,
    },
    #[error("no KV block of {block_bytes} bytes can be placed even after reclaiming every inactive tensor")]
    PoolExhausted { block_bytes: Bytes },
    #[error("no KV block at offset {0}")]
    NotAKvBlock(Bytes),
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// Serializable snapshot of a pool: ordered regions and the tensor map.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoolDump {
    pub pool_size: Bytes,
    pub regions: Vec<Region>,
    pub tensors: Vec<TensorDumpEntry>,
    pub pinned_models: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorDumpEntry {
    pub id: TensorId,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub entry: TensorEntry,
}

/// Result of placing KV blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvGrant {
    /// Offset of each requested block, in request order.
    pub offsets: Vec<Bytes>,
    /// Tensors evicted by urgent reclaim to make room.
    pub reclaimed: Vec<TensorId>,
}

/// The Reuse Store of one GPU.
///
/// Single-writer: every mutation goes through `&mut self`, so readers holding
/// `&self` (for [`ReusePool::dump`] or reuse-size queries) always observe a
/// state between operations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReusePool {
    regions: RegionList,
    tensors: TensorMap,
    pinned_models: BTreeSet<String>,
    load_bandwidth: BytesPerSecond,
    intra_copy_bandwidth: BytesPerSecond,
    bytes_merged: Bytes,
    kv_bytes: Bytes,
}

impl ReusePool {
    pub fn new(pool_size: Bytes) -> Self {
        ReusePool {
            regions: RegionList::new(pool_size),
            tensors: TensorMap::default(),
            pinned_models: BTreeSet::new(),
            load_bandwidth: 1.0,
            intra_copy_bandwidth: 1.0,
            bytes_merged: 0,
            kv_bytes: 0,
        }
    }

    pub fn for_gpu(gpu: &crate::model::GpuSpec) -> Self {
        let mut pool = Self::new(gpu.pool_size);
        pool.load_bandwidth = gpu.pcie_bandwidth;
        pool.intra_copy_bandwidth = gpu.intra_copy_bandwidth;
        pool
    }

    /// Load bandwidth assumed for models the stats table has no entry for.
    pub fn with_load_bandwidth(mut self, bw: BytesPerSecond) -> Self {
        self.load_bandwidth = bw;
        self
    }

    pub fn with_intra_copy_bandwidth(mut self, bw: BytesPerSecond) -> Self {
        self.intra_copy_bandwidth = bw;
        self
    }

    pub fn regions(&self) -> &RegionList {
        &self.regions
    }

    pub fn tensor_map(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn pool_size(&self) -> Bytes {
        self.regions.pool_size()
    }

    pub fn free_bytes(&self) -> Bytes {
        self.regions.free_bytes()
    }

    pub fn kv_bytes(&self) -> Bytes {
        self.kv_bytes
    }

    /// Cumulative bytes moved by relocations.
    pub fn bytes_merged(&self) -> Bytes {
        self.bytes_merged
    }

    pub fn tensor_bytes(&self) -> Bytes {
        self.pool_size() - self.free_bytes() - self.kv_bytes
    }

    pub fn pinned_bytes(&self) -> Bytes {
        self.tensors
            .iter()
            .filter(|(_, e)| self.pinned_models.contains(&e.model_id))
            .map(|(_, e)| e.size)
            .sum()
    }

    pub fn is_pinned(&self, id: &TensorId) -> bool {
        self.tensors
            .get(id)
            .is_some_and(|e| self.pinned_models.contains(&e.model_id))
    }

    pub fn lookup(&self, model: &ModelSpec) -> (Vec<TensorId>, Vec<TensorSpec>) {
        lookup(model, &self.tensors)
    }

    pub fn reuse_size(&self, model: &ModelSpec) -> Bytes {
        reuse_size(model, &self.tensors)
    }

    pub fn pin_model(&mut self, model_id: &str) {
        self.pinned_models.insert(model_id.into());
    }

    /// Ends an instance: its tensors stay resident but become evictable.
    pub fn unpin_model(&mut self, model_id: &str) {
        self.pinned_models.remove(model_id);
    }

    pub fn is_model_pinned(&self, model_id: &str) -> bool {
        self.pinned_models.contains(model_id)
    }

    /// Places `tensor` at `offset` without any planning. The extent must be
    /// free and the tensor not already resident.
    pub fn insert_tensor(
        &mut self,
        tensor: &TensorSpec,
        offset: Bytes,
        latency_sensitivity: f64,
        clock: Seconds,
    ) -> Result<(), PoolError> {
        if self.tensors.contains(&tensor.id) {
            return Err(PoolError::DestinationOccupied {
                offset,
                end: offset + tensor.size,
            });
        }
        self.regions
            .carve(offset, tensor.size, RegionState::Tensor(tensor.id))?;
        self.tensors.insert(
            tensor.id,
            TensorEntry {
                offset,
                size: tensor.size,
                model_id: tensor.model_id.clone(),
                last_access: clock,
                latency_sensitivity,
            },
        );
        Ok(())
    }

    pub fn evict_tensor(&mut self, id: TensorId) -> Result<Region, PoolError> {
        let entry = self.tensors.get(&id).ok_or(PoolError::NotFound(id))?;
        if self.pinned_models.contains(&entry.model_id) {
            return Err(PoolError::EvictPinned(id));
        }
        let offset = entry.offset;
        self.tensors.remove(&id);
        let (_, freed) = self.regions.release(offset)?;
        Ok(freed)
    }

    /// Evicts every unpinned tensor.
    pub fn evict_all_unpinned(&mut self) -> Vec<TensorId> {
        let victims: Vec<TensorId> = self
            .tensors
            .iter()
            .filter(|(_, e)| !self.pinned_models.contains(&e.model_id))
            .map(|(id, _)| *id)
            .collect();
        for id in &victims {
            self.evict_tensor(*id)
                .expect("unpinned tensor must be evictable");
        }
        victims
    }

    /// Moves a tensor into disjoint free space.
    pub fn move_tensor(&mut self, id: TensorId, new_offset: Bytes) -> Result<(), PoolError> {
        let entry = self.tensors.get(&id).ok_or(PoolError::NotFound(id))?;
        if self.pinned_models.contains(&entry.model_id) {
            return Err(PoolError::MovePinned(id));
        }
        let (old, size) = (entry.offset, entry.size);
        let new_end = new_offset.saturating_add(size);
        if new_offset < old + size && old < new_end {
            return Err(PoolError::OverlapMove(id));
        }
        if !self.regions.is_free_extent(new_offset, size) {
            return Err(PoolError::DestinationOccupied {
                offset: new_offset,
                end: new_end,
            });
        }
        self.regions
            .carve(new_offset, size, RegionState::Tensor(id))?;
        self.regions.release(old)?;
        self.tensors
            .entries
            .get_mut(&id)
            .expect("checked above")
            .offset = new_offset;
        self.bytes_merged += size;
        Ok(())
    }

    /// Relocates a set of tensors as one staged batch: every source is
    /// vacated first, then every tensor is written at its destination.
    /// Destinations may overlap vacated sources (including a tensor's own).
    /// Nothing changes if any step would fail.
    pub fn apply_relocations(&mut self, moves: &[(TensorId, Bytes)]) -> Result<Bytes, PoolError> {
        let mut scratch = self.regions.clone();
        let mut seen = BTreeSet::new();
        for &(id, _) in moves {
            let entry = self.tensors.get(&id).ok_or(PoolError::NotFound(id))?;
            if self.pinned_models.contains(&entry.model_id) {
                return Err(PoolError::MovePinned(id));
            }
            if !seen.insert(id) {
                return Err(PoolError::OverlapMove(id));
            }
            scratch.release(entry.offset)?;
        }
        let mut moved = 0;
        for &(id, dest) in moves {
            let size = self.tensors.get(&id).expect("checked above").size;
            scratch
                .carve(dest, size, RegionState::Tensor(id))
                .map_err(|_| PoolError::DestinationOccupied {
                    offset: dest,
                    end: dest + size,
                })?;
            moved += size;
        }
        self.regions = scratch;
        for &(id, dest) in moves {
            self.tensors
                .entries
                .get_mut(&id)
                .expect("checked above")
                .offset = dest;
        }
        self.bytes_merged += moved;
        Ok(moved)
    }

    /// Eviction candidates: every unpinned resident tensor, costed against
    /// `stats`.
    pub fn eviction_candidates(&self, stats: &ModelStatsTable) -> Vec<EvictionCandidate> {
        self.tensors
            .iter()
            .filter(|(_, e)| !self.pinned_models.contains(&e.model_id))
            .map(|(id, e)| {
                let p = stats.miss_probability(&e.model_id);
                let bw = stats
                    .load_bandwidth(&e.model_id)
                    .filter(|bw| *bw > 0.0)
                    .unwrap_or(self.load_bandwidth);
                EvictionCandidate {
                    tensor: *id,
                    size: e.size,
                    cost: packing::eviction_cost(e.size, p, bw, e.latency_sensitivity),
                    last_access: e.last_access,
                }
            })
            .collect()
    }

    /// Region list projected for the planner: unpinned tensors are movable,
    /// everything else allocated is fixed.
    pub fn plan_regions(&self) -> Vec<PlanRegion> {
        self.regions
            .iter()
            .map(|r| PlanRegion {
                offset: r.offset,
                size: r.size,
                kind: match r.state {
                    RegionState::Free => PlanKind::Free,
                    RegionState::Tensor(id) if !self.is_pinned(&id) => PlanKind::Movable(id),
                    _ => PlanKind::Fixed,
                },
            })
            .collect()
    }

    /// Brings every tensor of `model` into the pool, reusing resident ones.
    ///
    /// The model is pinned for the lifetime of its instance: its tensors are
    /// never chosen for eviction or relocation until [`Self::unpin_model`].
    /// On failure the pool is left unchanged.
    pub fn load_model(
        &mut self,
        model: &ModelSpec,
        stats: &ModelStatsTable,
        clock: Seconds,
        policy: &LoadPolicy,
    ) -> Result<LoadOutcome, PoolError> {
        let (hits, misses) = self.lookup(model);
        let was_pinned = self.is_model_pinned(&model.model_id);
        self.pin_model(&model.model_id);

        let other_pinned = self.pinned_bytes() - reuse_size(model, &self.tensors);
        let available = self
            .pool_size()
            .saturating_sub(other_pinned + self.kv_bytes);
        if model.total_size > available {
            if !was_pinned {
                self.unpin_model(&model.model_id);
            }
            return Err(PoolError::InsufficientMemory {
                model: model.model_id.clone(),
                needed: model.total_size,
                available,
            });
        }

        let plan = if misses.is_empty() {
            AllocationPlan::default()
        } else {
            let new: Vec<NewTensor> = misses
                .iter()
                .map(|t| NewTensor {
                    id: t.id,
                    size: t.size,
                })
                .collect();
            let candidates = self.eviction_candidates(stats);
            match packing::plan_allocation(&self.plan_regions(), &new, &candidates, policy) {
                Ok(plan) => plan,
                Err(_) => {
                    if !was_pinned {
                        self.unpin_model(&model.model_id);
                    }
                    return Err(PoolError::InsufficientMemory {
                        model: model.model_id.clone(),
                        needed: new.iter().map(|t| t.size).sum(),
                        available: self.free_bytes()
                            + candidates.iter().map(|c| c.size).sum::<Bytes>(),
                    });
                }
            }
        };

        for id in &plan.evictions {
            self.evict_tensor(*id)
                .expect("planner evicts only unpinned residents");
        }
        self.apply_relocations(&plan.relocations)
            .expect("planner relocations target vacated space");
        let by_id: BTreeMap<TensorId, &TensorSpec> = misses.iter().map(|t| (t.id, t)).collect();
        for &(id, offset) in &plan.placements {
            self.insert_tensor(by_id[&id], offset, model.latency_sensitivity, clock)
                .expect("planner places into free space");
        }
        for t in &model.tensors {
            if let Some(e) = self.tensors.entries.get_mut(&t.id) {
                e.last_access = clock;
            }
        }

        Ok(LoadOutcome {
            hit_tensors: hits,
            bytes_transferred: misses.iter().map(|t| t.size).sum(),
            missed_tensors: misses,
            bytes_merged: plan.total_merge_cost,
            eviction_cost_total: plan.total_eviction_cost,
            plan,
        })
    }

    /// Evicts inactive tensors in minimal-cost order until `needed_blocks`
    /// blocks of `block_bytes` fit in the free regions. No relocation is
    /// attempted on this path.
    pub fn urgent_reclaim(
        &mut self,
        needed_blocks: u64,
        block_bytes: Bytes,
        stats: &ModelStatsTable,
    ) -> Result<Vec<TensorId>, PoolError> {
        let mut evicted = Vec::new();
        if self.regions.block_capacity(block_bytes) >= needed_blocks {
            return Ok(evicted);
        }
        let order = packing::stage1_order(&self.eviction_candidates(stats));
        for id in order {
            self.evict_tensor(id).expect("candidate is unpinned");
            evicted.push(id);
            if self.regions.block_capacity(block_bytes) >= needed_blocks {
                return Ok(evicted);
            }
        }
        Err(PoolError::PoolExhausted { block_bytes })
    }

    /// Block allocator: places one block per entry of `pbns`, best fit, in
    /// order. When a block cannot be placed, inactive tensors are reclaimed
    /// for that block. All-or-nothing.
    pub fn allocate_kv_blocks(
        &mut self,
        pbns: &[Pbn],
        block_bytes: Bytes,
        stats: &ModelStatsTable,
    ) -> Result<KvGrant, PoolError> {
        if self.regions.block_capacity(block_bytes) >= pbns.len() as u64 {
            let offsets = pbns
                .iter()
                .map(|&pbn| {
                    self.place_kv_block(pbn, block_bytes)
                        .expect("capacity checked")
                })
                .collect();
            return Ok(KvGrant {
                offsets,
                reclaimed: Vec::new(),
            });
        }
        let mut scratch = self.clone();
        let mut grant = KvGrant::default();
        for &pbn in pbns {
            let offset = match scratch.place_kv_block(pbn, block_bytes) {
                Some(o) => o,
                None => {
                    grant
                        .reclaimed
                        .extend(scratch.urgent_reclaim(1, block_bytes, stats)?);
                    scratch
                        .place_kv_block(pbn, block_bytes)
                        .expect("reclaim made room")
                }
            };
            grant.offsets.push(offset);
        }
        *self = scratch;
        Ok(grant)
    }

    fn place_kv_block(&mut self, pbn: Pbn, block_bytes: Bytes) -> Option<Bytes> {
        let hole = self.regions.best_fit(block_bytes)?;
        self.regions
            .carve(hole.offset, block_bytes, RegionState::KvBlock(pbn))
            .expect("best fit hole is free");
        self.kv_bytes += block_bytes;
        Some(hole.offset)
    }

    pub fn free_kv_block(&mut self, offset: Bytes) -> Result<Region, PoolError> {
        match self.regions.get(offset) {
            Some(Region {
                state: RegionState::KvBlock(_),
                size,
                ..
            }) => {
                let (_, freed) = self.regions.release(offset)?;
                self.kv_bytes -= size;
                Ok(freed)
            }
            _ => Err(PoolError::NotAKvBlock(offset)),
        }
    }

    pub fn dump(&self) -> PoolDump {
        PoolDump {
            pool_size: self.pool_size(),
            regions: self.regions.iter().collect(),
            tensors: self
                .tensors
                .iter()
                .map(|(id, e)| TensorDumpEntry {
                    id: *id,
                    entry: e.clone(),
                })
                .collect(),
            pinned_models: self.pinned_models.iter().cloned().collect(),
        }
    }

    /// Full consistency scan: tiling, coalescing, map/region bijection and
    /// byte conservation.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.regions.check()?;
        let mut tensor_regions = 0;
        let (mut tensor_bytes, mut kv_bytes) = (0, 0);
        for r in self.regions.iter() {
            match r.state {
                RegionState::Tensor(id) => {
                    tensor_regions += 1;
                    tensor_bytes += r.size;
                    let e = self.tensors.get(&id).ok_or_else(|| {
                        format!("region at {} holds unmapped tensor {}", r.offset, id)
                    })?;
                    if e.offset != r.offset || e.size != r.size {
                        return Err(format!("tensor {} map/region mismatch", id));
                    }
                }
                RegionState::KvBlock(_) => kv_bytes += r.size,
                RegionState::Free => {}
            }
        }
        if tensor_regions != self.tensors.len() {
            return Err(format!(
                "{} tensor regions but {} map entries",
                tensor_regions,
                self.tensors.len()
            ));
        }
        if kv_bytes != self.kv_bytes {
            return Err(format!("kv byte counter {} != {}", self.kv_bytes, kv_bytes));
        }
        if self.free_bytes() + tensor_bytes + kv_bytes != self.pool_size() {
            return Err("free + tensor + kv bytes != pool size".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StatsEvent, TensorSpec};
    use alloc::vec;

    fn blob(model: &str, name: &str, size: Bytes) -> TensorSpec {
        TensorSpec::blob(model, name, size)
    }

    fn model(id: &str, sizes: &[Bytes]) -> ModelSpec {
        let tensors = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| blob(id, &format!("t{i}"), s))
            .collect();
        ModelSpec::new(id, tensors, 1).unwrap()
    }

    fn layout(pool: &ReusePool) -> Vec<(Bytes, Bytes, bool)> {
        pool.regions()
            .iter()
            .map(|r| (r.offset, r.size, r.state.is_free()))
            .collect()
    }

    #[test]
    fn carve_and_release_coalesce() {
        let mut list = RegionList::new(10);
        list.carve(2, 3, RegionState::KvBlock(Pbn(0))).unwrap();
        list.carve(5, 2, RegionState::KvBlock(Pbn(1))).unwrap();
        assert_eq!(list.len(), 4);
        list.check().unwrap();
        list.release(2).unwrap();
        list.check().unwrap();
        let (_, merged) = list.release(5).unwrap();
        assert_eq!(
            merged,
            Region {
                offset: 0,
                size: 10,
                state: RegionState::Free
            }
        );
        assert_eq!(list.len(), 1);
        assert_eq!(list.release(0), Err(RegionError::AlreadyFree(0)));
    }

    #[test]
    fn carve_rejects_occupied_and_out_of_bounds() {
        let mut list = RegionList::new(10);
        list.carve(0, 4, RegionState::KvBlock(Pbn(0))).unwrap();
        assert!(matches!(
            list.carve(3, 2, RegionState::KvBlock(Pbn(1))),
            Err(RegionError::Occupied { .. })
        ));
        assert!(matches!(
            list.carve(8, 4, RegionState::KvBlock(Pbn(1))),
            Err(RegionError::OutOfBounds { .. })
        ));
        assert_eq!(
            list.carve(5, 0, RegionState::KvBlock(Pbn(1))),
            Err(RegionError::ZeroSize)
        );
    }

    #[test]
    fn best_fit_prefers_smallest_then_lowest() {
        let mut list = RegionList::new(20);
        list.carve(3, 1, RegionState::KvBlock(Pbn(0))).unwrap(); // free [0,3)
        list.carve(7, 1, RegionState::KvBlock(Pbn(1))).unwrap(); // free [4,7)
                                                                 // free [8,20)
        let r = list.best_fit(3).unwrap();
        assert_eq!(r.offset, 0);
        assert_eq!(list.best_fit(4).unwrap().offset, 8);
        assert!(list.best_fit(13).is_none());
    }

    #[test]
    fn evict_between_free_neighbours_merges() {
        let mut pool = ReusePool::new(9);
        let a = blob("m", "a", 3);
        pool.insert_tensor(&a, 3, 1.0, 0.0).unwrap();
        let freed = pool.evict_tensor(a.id).unwrap();
        assert_eq!(
            freed,
            Region {
                offset: 0,
                size: 9,
                state: RegionState::Free
            }
        );
        assert!(pool.tensor_map().is_empty());
        pool.check_invariants().unwrap();
    }

    #[test]
    fn evict_between_allocated_neighbours_frees_exact_size() {
        let mut pool = ReusePool::new(9);
        let (a, b, c) = (blob("m", "a", 3), blob("m", "b", 3), blob("m", "c", 3));
        for (t, off) in [(&a, 0), (&b, 3), (&c, 6)] {
            pool.insert_tensor(t, off, 1.0, 0.0).unwrap();
        }
        let freed = pool.evict_tensor(b.id).unwrap();
        assert_eq!(
            freed,
            Region {
                offset: 3,
                size: 3,
                state: RegionState::Free
            }
        );
        pool.check_invariants().unwrap();
    }

    #[test]
    fn evict_errors() {
        let mut pool = ReusePool::new(9);
        let a = blob("m", "a", 3);
        assert_eq!(pool.evict_tensor(a.id), Err(PoolError::NotFound(a.id)));
        pool.insert_tensor(&a, 0, 1.0, 0.0).unwrap();
        pool.pin_model("m");
        assert_eq!(pool.evict_tensor(a.id), Err(PoolError::EvictPinned(a.id)));
        pool.unpin_model("m");
        assert!(pool.evict_tensor(a.id).is_ok());
    }

    #[test]
    fn move_merges_two_frees() {
        // [Free 4 | A(2) | Free 3] -> move A to 0 -> [A(2) | Free 7]
        let mut pool = ReusePool::new(9);
        let a = blob("m", "a", 2);
        pool.insert_tensor(&a, 4, 1.0, 0.0).unwrap();
        pool.move_tensor(a.id, 0).unwrap();
        assert_eq!(layout(&pool), vec![(0, 2, false), (2, 7, true)]);
        assert_eq!(pool.bytes_merged(), 2);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn move_into_exact_hole_leaves_no_sliver() {
        let mut pool = ReusePool::new(10);
        let (a, b) = (blob("m", "a", 3), blob("m", "b", 3));
        pool.insert_tensor(&a, 3, 1.0, 0.0).unwrap(); // [F3][A3][F4]
        pool.insert_tensor(&b, 7, 1.0, 0.0).unwrap(); // [F3][A3][F1][B3]
        pool.move_tensor(b.id, 0).unwrap();
        assert_eq!(
            layout(&pool),
            vec![(0, 3, false), (3, 3, false), (6, 4, true)]
        );
        pool.check_invariants().unwrap();
    }

    #[test]
    fn move_errors() {
        let mut pool = ReusePool::new(10);
        let (a, b) = (blob("m", "a", 4), blob("n", "b", 2));
        pool.insert_tensor(&a, 2, 1.0, 0.0).unwrap();
        pool.insert_tensor(&b, 8, 1.0, 0.0).unwrap();
        assert_eq!(pool.move_tensor(a.id, 0), Err(PoolError::OverlapMove(a.id)));
        assert!(matches!(
            pool.move_tensor(a.id, 5),
            Err(PoolError::OverlapMove(_))
        ));
        assert!(matches!(
            pool.move_tensor(a.id, 6),
            Err(PoolError::DestinationOccupied { .. })
        ));
        assert!(matches!(
            pool.move_tensor(b.id, 5),
            Err(PoolError::DestinationOccupied { .. })
        ));
        pool.pin_model("n");
        assert_eq!(pool.move_tensor(b.id, 0), Err(PoolError::MovePinned(b.id)));
        pool.check_invariants().unwrap();
    }

    #[test]
    fn staged_relocation_allows_self_overlap() {
        let mut pool = ReusePool::new(10);
        let a = blob("m", "a", 4);
        pool.insert_tensor(&a, 1, 1.0, 0.0).unwrap();
        assert_eq!(pool.apply_relocations(&[(a.id, 0)]).unwrap(), 4);
        assert_eq!(layout(&pool), vec![(0, 4, false), (4, 6, true)]);
        pool.check_invariants().unwrap();
        // Failure leaves the pool untouched.
        let before = pool.clone();
        assert!(pool.apply_relocations(&[(a.id, 8)]).is_err());
        assert_eq!(pool, before);
    }

    #[test]
    fn lookup_partitions_hits_and_misses() {
        let m = model("m", &[1, 2, 3, 4, 5]);
        let mut pool = ReusePool::new(100);
        let (h, miss) = pool.lookup(&m);
        assert!(h.is_empty());
        assert_eq!(miss.len(), 5);
        pool.insert_tensor(&m.tensors[1], 0, 1.0, 0.0).unwrap();
        pool.insert_tensor(&m.tensors[3], 10, 1.0, 0.0).unwrap();
        let (h, miss) = pool.lookup(&m);
        assert_eq!(h, vec![m.tensors[1].id, m.tensors[3].id]);
        assert_eq!(miss.len(), 3);
        assert_eq!(pool.reuse_size(&m), 2 + 4);
    }

    #[test]
    fn cold_then_warm_load() {
        let m = model("m", &[4, 3, 2]);
        let mut pool = ReusePool::new(20);
        let stats = ModelStatsTable::default();
        let out = pool
            .load_model(&m, &stats, 1.0, &LoadPolicy::default())
            .unwrap();
        assert_eq!(out.bytes_transferred, m.total_size);
        assert!(out.plan.evictions.is_empty());
        assert_eq!(out.bytes_merged, 0);
        assert_eq!(pool.reuse_size(&m), m.total_size);
        pool.check_invariants().unwrap();

        pool.unpin_model("m");
        let regions_before: Vec<Region> = pool.regions().iter().collect();
        let out = pool
            .load_model(&m, &stats, 2.0, &LoadPolicy::default())
            .unwrap();
        assert_eq!(out.bytes_transferred, 0);
        assert_eq!(out.plan, AllocationPlan::default());
        assert_eq!(pool.regions().iter().collect::<Vec<_>>(), regions_before);
        assert!(pool.tensor_map().iter().all(|(_, e)| e.last_access == 2.0));
    }

    #[test]
    fn load_evicts_cheapest_model_first() {
        let a = model("a", &[6]);
        let b = model("b", &[6]);
        let c = model("c", &[6]);
        let mut pool = ReusePool::new(12);
        let mut stats = ModelStatsTable::default();
        for m in ["a", "b", "c"] {
            stats.set_load_bandwidth(m, 1.0);
        }
        stats
            .record(StatsEvent::Requested {
                model_id: "a",
                t: 0.0,
            })
            .unwrap();
        pool.load_model(&a, &stats, 0.0, &LoadPolicy::default())
            .unwrap();
        pool.unpin_model("a");
        stats
            .record(StatsEvent::Requested {
                model_id: "b",
                t: 1.0,
            })
            .unwrap();
        stats
            .record(StatsEvent::Requested {
                model_id: "b",
                t: 1.5,
            })
            .unwrap();
        pool.load_model(&b, &stats, 1.0, &LoadPolicy::default())
            .unwrap();
        pool.unpin_model("b");
        stats
            .record(StatsEvent::Requested {
                model_id: "c",
                t: 2.0,
            })
            .unwrap();
        let out = pool
            .load_model(&c, &stats, 2.0, &LoadPolicy::default())
            .unwrap();
        // p_a < p_b, so a's tensor goes.
        assert_eq!(
            out.plan.evictions.iter().copied().collect::<Vec<_>>(),
            vec![a.tensors[0].id]
        );
        assert!(out.eviction_cost_total > 0.0);
        assert_eq!(pool.reuse_size(&b), 6);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn load_fails_cleanly_when_pinned_space_blocks() {
        let a = model("a", &[6]);
        let b = model("b", &[7]);
        let mut pool = ReusePool::new(12);
        let stats = ModelStatsTable::default();
        pool.load_model(&a, &stats, 0.0, &LoadPolicy::default())
            .unwrap();
        let before = pool.clone();
        let err = pool
            .load_model(&b, &stats, 1.0, &LoadPolicy::default())
            .unwrap_err();
        assert!(matches!(
            err,
            PoolError::InsufficientMemory {
                needed: 7,
                available: 6,
                ..
            }
        ));
        assert_eq!(pool, before);
    }

    #[test]
    fn urgent_reclaim_evicts_cold_tensor() {
        let mut pool = ReusePool::new(8);
        let t = blob("cold", "w", 4);
        let pinned = blob("hot", "w", 4);
        pool.insert_tensor(&t, 0, 1.0, 0.0).unwrap();
        pool.insert_tensor(&pinned, 4, 1.0, 0.0).unwrap();
        pool.pin_model("hot");
        let stats = ModelStatsTable::default();
        let evicted = pool.urgent_reclaim(1, 2, &stats).unwrap();
        assert_eq!(evicted, vec![t.id]);
        assert_eq!(
            pool.urgent_reclaim(5, 2, &stats),
            Err(PoolError::PoolExhausted { block_bytes: 2 })
        );
    }

    #[test]
    fn kv_blocks_are_atomic() {
        let mut pool = ReusePool::new(8);
        let pinned = blob("hot", "w", 4);
        pool.insert_tensor(&pinned, 0, 1.0, 0.0).unwrap();
        pool.pin_model("hot");
        let stats = ModelStatsTable::default();
        let before = pool.clone();
        let err = pool
            .allocate_kv_blocks(&[Pbn(0), Pbn(1), Pbn(2)], 2, &stats)
            .unwrap_err();
        assert_eq!(err, PoolError::PoolExhausted { block_bytes: 2 });
        assert_eq!(pool, before);
        let grant = pool
            .allocate_kv_blocks(&[Pbn(0), Pbn(1)], 2, &stats)
            .unwrap();
        assert_eq!(grant.offsets, vec![4, 6]);
        assert_eq!(pool.kv_bytes(), 4);
        pool.free_kv_block(4).unwrap();
        assert_eq!(pool.free_kv_block(4), Err(PoolError::NotAKvBlock(4)));
        pool.check_invariants().unwrap();
    }
}
