//! Allocation planning for new tensors in a fragmented pool.
//!
//! Choosing which resident tensors to evict and which to move so that a set
//! of new tensors fits is a multi-choice, multi-dimensional knapsack problem:
//! minimise `Σ c_j·y_j + m_j·z_j` over evictions `y` and relocations `z`,
//! subject to every new tensor being placed and no tensor being both evicted
//! and moved. [`plan_allocation`] solves it in two stages:
//!
//! 1. [`minimal_cost_eviction`] frees enough bytes by evicting tensors in
//!    ascending eviction cost.
//! 2. [`partitioned_gain_packing`] starts from the merge-everything plan and
//!    recursively splits the free space at allocated regions whenever the new
//!    tensors can still be packed into both halves, saving the bytes of every
//!    region it no longer has to move.
//!
//! [`brute_force_oracle`] enumerates every keep/evict/move assignment of a
//! small instance and serves as the reference for the heuristic.

mod bench;
mod oracle;
mod pgp;
mod stage1;

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::model::TensorId;
use crate::{Bytes, BytesPerSecond, Seconds};

pub use bench::{random_instance, BenchInstance, BenchParams};
pub use oracle::{
    brute_force_oracle, OracleError, OracleSolution, ORACLE_MAX_NEW, ORACLE_MAX_RESIDENT,
};
pub use pgp::{
    partitioned_gain_packing, try_packing, Allocation, PgpResult, Subspace, TryPackingRule,
};
pub use stage1::{minimal_cost_eviction, random_order, stage1_order};

/// A tensor that has to be placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NewTensor {
    pub id: TensorId,
    pub size: Bytes,
}

/// A resident, unpinned tensor the planner may evict or move.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvictionCandidate {
    pub tensor: TensorId,
    /// Also its merge cost in bytes.
    pub size: Bytes,
    /// Expected reload penalty of evicting it, in seconds.
    pub cost: Seconds,
    pub last_access: Seconds,
}

/// Region as seen by the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanRegion {
    pub offset: Bytes,
    pub size: Bytes,
    pub kind: PlanKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PlanKind {
    Free,
    /// Unpinned tensor: may be evicted or relocated.
    Movable(TensorId),
    /// Pinned tensor or KV block: never touched.
    Fixed,
}

impl PlanRegion {
    pub fn end(&self) -> Bytes {
        self.offset + self.size
    }

    pub fn is_free(&self) -> bool {
        matches!(self.kind, PlanKind::Free)
    }
}

/// Eviction cost of a resident tensor: `p_m · (s / b_m) · α_m`.
pub fn eviction_cost(
    size: Bytes,
    miss_probability: f64,
    load_bandwidth: BytesPerSecond,
    alpha: f64,
) -> Seconds {
    debug_assert!(load_bandwidth > 0.0);
    miss_probability * (size as f64 / load_bandwidth) * alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvictionPolicy {
    /// Ascending eviction cost.
    #[default]
    MinCost,
    /// Uniformly random order, seeded.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MergePolicy {
    #[default]
    PartitionedGain,
    /// Compact every movable tensor of the working extent on every load.
    GlobalMerge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoadPolicy {
    pub eviction: EvictionPolicy,
    pub merge: MergePolicy,
    pub rule: TryPackingRule,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("{needed} bytes requested but only {available} can be freed")]
    Infeasible { needed: Bytes, available: Bytes },
}

/// Output of [`plan_allocation`].
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AllocationPlan {
    pub evictions: BTreeSet<TensorId>,
    /// `(tensor, new offset)`, applied as one staged batch after evictions.
    pub relocations: Vec<(TensorId, Bytes)>,
    /// `(new tensor, offset)`.
    pub placements: Vec<(TensorId, Bytes)>,
    pub total_eviction_cost: Seconds,
    /// Bytes actually moved by `relocations`.
    pub total_merge_cost: Bytes,
    /// Merge cost bound reported by the packing stage (`ℳ`), summed over
    /// segments. Never below `total_merge_cost`.
    pub planned_merge_cost: Bytes,
}

impl AllocationPlan {
    pub fn relocated(&self) -> BTreeSet<TensorId> {
        self.relocations.iter().map(|&(id, _)| id).collect()
    }

    /// `Σ c_j` over evictions plus `Σ s_j / intra_bw` over relocations.
    pub fn objective(
        &self,
        candidates: &[EvictionCandidate],
        intra_copy_bandwidth: BytesPerSecond,
    ) -> Seconds {
        objective(
            candidates,
            &self.evictions,
            &self.relocated(),
            intra_copy_bandwidth,
        )
    }
}

/// Eviction plus merge cost of an eviction/relocation choice, in seconds. Terms are
/// accumulated in candidate order so equal choices give bit-identical sums.
pub fn objective(
    candidates: &[EvictionCandidate],
    evictions: &BTreeSet<TensorId>,
    relocations: &BTreeSet<TensorId>,
    intra_copy_bandwidth: BytesPerSecond,
) -> Seconds {
    let mut total = 0.0;
    for c in candidates {
        if evictions.contains(&c.tensor) {
            total += c.cost;
        } else if relocations.contains(&c.tensor) {
            total += merge_seconds(c.size, intra_copy_bandwidth);
        }
    }
    total
}

pub(crate) fn merge_seconds(size: Bytes, intra_copy_bandwidth: BytesPerSecond) -> Seconds {
    size as f64 / intra_copy_bandwidth
}

/// Runs both stages and turns the result into concrete evictions,
/// relocations and placements.
///
/// `regions` must tile the pool in address order. Fixed regions split the
/// free space into independent segments; the new tensors are first spread
/// over segments (largest remaining capacity first) and each segment is then
/// packed on its own. If fragmentation across fixed regions defeats that
/// spread, further candidates are evicted in stage-1 order.
pub fn plan_allocation(
    regions: &[PlanRegion],
    new_tensors: &[NewTensor],
    candidates: &[EvictionCandidate],
    policy: &LoadPolicy,
) -> Result<AllocationPlan, PlanError> {
    let mut tensors = new_tensors.to_vec();
    sort_descending(&mut tensors);
    if tensors.is_empty() {
        return Ok(AllocationPlan::default());
    }
    let needed: Bytes = tensors.iter().map(|t| t.size).sum();
    let free_now: Bytes = regions.iter().filter(|r| r.is_free()).map(|r| r.size).sum();
    let movable: BTreeSet<TensorId> = regions
        .iter()
        .filter_map(|r| match r.kind {
            PlanKind::Movable(id) => Some(id),
            _ => None,
        })
        .collect();
    let candidates: Vec<EvictionCandidate> = candidates
        .iter()
        .copied()
        .filter(|c| movable.contains(&c.tensor))
        .collect();

    let order = match policy.eviction {
        EvictionPolicy::MinCost => stage1_order(&candidates),
        EvictionPolicy::Random { seed } => random_order(&candidates, seed ^ tensors[0].id.0 as u64),
    };
    let first = minimal_cost_prefix(&order, &candidates, needed, free_now)?;

    for k in first..=order.len() {
        let evicted: BTreeSet<TensorId> = order[..k].iter().copied().collect();
        let working = apply_evictions(regions, &evicted);
        let segments = segments(&working);
        let Some(assignment) = spread_over_segments(&tensors, &segments) else {
            continue;
        };
        let mut plan = AllocationPlan {
            total_eviction_cost: candidates
                .iter()
                .filter(|c| evicted.contains(&c.tensor))
                .map(|c| c.cost)
                .sum(),
            evictions: evicted,
            ..AllocationPlan::default()
        };
        for (segment, assigned) in segments.iter().zip(assignment) {
            if assigned.is_empty() {
                continue;
            }
            match policy.merge {
                MergePolicy::PartitionedGain => {
                    let result = partitioned_gain_packing(&assigned, segment, policy.rule);
                    plan.planned_merge_cost += result.merge_cost;
                    for leaf in &result.allocations {
                        realize_leaf(
                            &segment[leaf.subspace.first..=leaf.subspace.last],
                            &leaf.tensors,
                            true,
                            &mut plan,
                        );
                    }
                }
                MergePolicy::GlobalMerge => {
                    plan.planned_merge_cost += allocated_bytes(segment);
                    realize_leaf(segment, &assigned, false, &mut plan);
                }
            }
        }
        plan.total_merge_cost = candidates
            .iter()
            .filter(|c| plan.relocations.iter().any(|&(id, _)| id == c.tensor))
            .map(|c| c.size)
            .sum();
        return Ok(plan);
    }
    Err(PlanError::Infeasible {
        needed,
        available: free_now + candidates.iter().map(|c| c.size).sum::<Bytes>(),
    })
}

fn minimal_cost_prefix(
    order: &[TensorId],
    candidates: &[EvictionCandidate],
    needed: Bytes,
    free_now: Bytes,
) -> Result<usize, PlanError> {
    let mut freed = free_now;
    if freed >= needed {
        return Ok(0);
    }
    for (k, id) in order.iter().enumerate() {
        freed += candidates
            .iter()
            .find(|c| c.tensor == *id)
            .map_or(0, |c| c.size);
        if freed >= needed {
            return Ok(k + 1);
        }
    }
    Err(PlanError::Infeasible {
        needed,
        available: freed,
    })
}

pub(crate) fn sort_descending(tensors: &mut [NewTensor]) {
    tensors.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
}

fn allocated_bytes(regions: &[PlanRegion]) -> Bytes {
    regions
        .iter()
        .filter(|r| !r.is_free())
        .map(|r| r.size)
        .sum()
}

/// Region list with `evicted` tensors turned into free space, coalesced.
pub(crate) fn apply_evictions(
    regions: &[PlanRegion],
    evicted: &BTreeSet<TensorId>,
) -> Vec<PlanRegion> {
    let mut out: Vec<PlanRegion> = Vec::with_capacity(regions.len());
    for r in regions {
        let free = match r.kind {
            PlanKind::Free => true,
            PlanKind::Movable(id) => evicted.contains(&id),
            PlanKind::Fixed => false,
        };
        match out.last_mut() {
            Some(prev) if free && prev.is_free() => prev.size += r.size,
            _ if free => out.push(PlanRegion {
                kind: PlanKind::Free,
                ..*r
            }),
            _ => out.push(*r),
        }
    }
    out
}

/// Maximal runs between fixed regions, trimmed so they begin and end with a
/// free region. Runs without free space are dropped.
pub(crate) fn segments(regions: &[PlanRegion]) -> Vec<Vec<PlanRegion>> {
    regions
        .split(|r| matches!(r.kind, PlanKind::Fixed))
        .filter_map(|run| {
            let first = run.iter().position(PlanRegion::is_free)?;
            let last = run.iter().rposition(PlanRegion::is_free)?;
            Some(run[first..=last].to_vec())
        })
        .collect()
}

/// Distributes size-descending tensors over segments, each to the segment
/// with the most remaining free bytes. `None` if some tensor does not fit
/// the segment it is steered to.
fn spread_over_segments(
    tensors: &[NewTensor],
    segments: &[Vec<PlanRegion>],
) -> Option<Vec<Vec<NewTensor>>> {
    let mut remaining: Vec<Bytes> = segments
        .iter()
        .map(|s| s.iter().filter(|r| r.is_free()).map(|r| r.size).sum())
        .collect();
    let mut assigned = alloc::vec![Vec::new(); segments.len()];
    for t in tensors {
        let (idx, _) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        if t.size > remaining[idx] {
            return None;
        }
        remaining[idx] -= t.size;
        assigned[idx].push(*t);
    }
    Some(assigned)
}

/// Turns one final subspace and its tensors into placements.
///
/// With `try_in_place`, the tensors are first packed best-fit-decreasing into
/// the existing holes; if that works nothing moves. Otherwise every movable
/// tensor of the subspace is compacted to its start (in address order) and
/// the new tensors follow contiguously.
fn realize_leaf(
    regions: &[PlanRegion],
    tensors: &[NewTensor],
    try_in_place: bool,
    plan: &mut AllocationPlan,
) {
    if tensors.is_empty() {
        return;
    }
    if try_in_place {
        if let Some(placements) = best_fit_in_holes(regions, tensors) {
            plan.placements.extend(placements);
            return;
        }
    }
    let Some(start) = regions.first().map(|r| r.offset) else {
        return;
    };
    let mut cursor = start;
    for r in regions {
        if let PlanKind::Movable(id) = r.kind {
            plan.relocations.push((id, cursor));
            cursor += r.size;
        }
    }
    for t in tensors {
        plan.placements.push((t.id, cursor));
        cursor += t.size;
    }
}

fn best_fit_in_holes(
    regions: &[PlanRegion],
    tensors: &[NewTensor],
) -> Option<Vec<(TensorId, Bytes)>> {
    let mut holes: Vec<(Bytes, Bytes)> = regions
        .iter()
        .filter(|r| r.is_free())
        .map(|r| (r.offset, r.size))
        .collect();
    let mut out = Vec::with_capacity(tensors.len());
    for t in tensors {
        let hole = holes
            .iter_mut()
            .filter(|h| h.1 >= t.size)
            .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))?;
        out.push((t.id, hole.0));
        hole.0 += t.size;
        hole.1 -= t.size;
    }
    Some(out)
}
