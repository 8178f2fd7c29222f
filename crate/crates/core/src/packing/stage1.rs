use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EvictionCandidate, PlanError};
use crate::model::TensorId;
use crate::Bytes;

/// Candidates by ascending eviction cost; ties prefer larger tensors, then
/// older accesses, then lower ids.
pub fn stage1_order(candidates: &[EvictionCandidate]) -> Vec<TensorId> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.size.cmp(&a.size))
            .then(a.last_access.total_cmp(&b.last_access))
            .then(a.tensor.cmp(&b.tensor))
    });
    sorted.into_iter().map(|c| c.tensor).collect()
}

/// Seeded uniform permutation of the candidates.
pub fn random_order(candidates: &[EvictionCandidate], seed: u64) -> Vec<TensorId> {
    let mut ids: Vec<TensorId> = candidates.iter().map(|c| c.tensor).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Shortest prefix of [`stage1_order`] whose sizes, together with
/// `free_now`, cover `needed`.
pub fn minimal_cost_eviction(
    needed: Bytes,
    candidates: &[EvictionCandidate],
    free_now: Bytes,
) -> Result<Vec<TensorId>, PlanError> {
    let order = stage1_order(candidates);
    let mut freed = free_now;
    let mut out = Vec::new();
    for id in order {
        if freed >= needed {
            break;
        }
        freed += candidates
            .iter()
            .find(|c| c.tensor == id)
            .map_or(0, |c| c.size);
        out.push(id);
    }
    if freed >= needed {
        Ok(out)
    } else {
        Err(PlanError::Infeasible {
            needed,
            available: freed,
        })
    }
}
