use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{
    EvictionCandidate, NewTensor, PlanKind, PlanRegion, ORACLE_MAX_NEW, ORACLE_MAX_RESIDENT,
};
use crate::model::TensorSpec;
use crate::{Bytes, BytesPerSecond};

/// Shape of random planner instances. Sizes are in abstract units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchParams {
    pub max_resident: usize,
    pub max_new: usize,
    pub max_tensor: Bytes,
    pub max_gap: Bytes,
    pub intra_copy_bandwidth: BytesPerSecond,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            max_resident: ORACLE_MAX_RESIDENT,
            max_new: ORACLE_MAX_NEW,
            max_tensor: 8,
            max_gap: 6,
            intra_copy_bandwidth: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchInstance {
    pub regions: Vec<PlanRegion>,
    pub new_tensors: Vec<NewTensor>,
    pub candidates: Vec<EvictionCandidate>,
    pub intra_copy_bandwidth: BytesPerSecond,
}

impl BenchInstance {
    pub fn pool_size(&self) -> Bytes {
        self.regions.last().map_or(0, PlanRegion::end)
    }
}

/// Random fragmented pool: resident tensors separated by free gaps (possibly
/// empty), each with a random miss probability and sensitivity, plus a batch
/// of new tensors whose total never exceeds the pool.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, params: &BenchParams) -> BenchInstance {
    let resident = rng.random_range(0..=params.max_resident);
    let mut regions = Vec::new();
    let mut candidates = Vec::new();
    let mut offset = 0;
    let push_gap = |rng: &mut R, regions: &mut Vec<PlanRegion>, offset: &mut Bytes| {
        let gap = rng.random_range(0..=params.max_gap);
        if gap > 0 {
            regions.push(PlanRegion {
                offset: *offset,
                size: gap,
                kind: PlanKind::Free,
            });
            *offset += gap;
        }
    };
    push_gap(rng, &mut regions, &mut offset);
    for i in 0..resident {
        let size = rng.random_range(1..=params.max_tensor);
        let id = TensorSpec::blob("resident", &format!("{i}"), size).id;
        regions.push(PlanRegion {
            offset,
            size,
            kind: PlanKind::Movable(id),
        });
        offset += size;
        let miss: f64 = rng.random();
        let alpha = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
        candidates.push(EvictionCandidate {
            tensor: id,
            size,
            cost: super::eviction_cost(size, miss, 1.0, alpha),
            last_access: i as f64,
        });
        push_gap(rng, &mut regions, &mut offset);
    }
    if regions.is_empty() {
        let size = rng.random_range(1..=params.max_tensor);
        regions.push(PlanRegion {
            offset: 0,
            size,
            kind: PlanKind::Free,
        });
        offset = size;
    }
    let pool = offset;
    let count = rng.random_range(1..=params.max_new);
    let mut new_tensors = Vec::new();
    let mut total = 0;
    for i in 0..count {
        let size = rng.random_range(1..=params.max_tensor);
        if total + size > pool {
            break;
        }
        total += size;
        new_tensors.push(NewTensor {
            id: TensorSpec::blob("new", &format!("{i}"), size).id,
            size,
        });
    }
    BenchInstance {
        regions,
        new_tensors,
        candidates,
        intra_copy_bandwidth: params.intra_copy_bandwidth,
    }
}
