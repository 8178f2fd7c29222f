use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{merge_seconds, EvictionCandidate, NewTensor, PlanKind, PlanRegion};
use crate::model::TensorId;
use crate::{Bytes, BytesPerSecond, Seconds};

pub const ORACLE_MAX_RESIDENT: usize = 10;
pub const ORACLE_MAX_NEW: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("instance too large for exhaustive search: {resident} resident, {new} new tensors")]
    InstanceTooLarge { resident: usize, new: usize },
    #[error("no eviction/relocation choice makes the new tensors fit")]
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub objective: Seconds,
    pub evictions: BTreeSet<TensorId>,
    pub relocations: BTreeSet<TensorId>,
    pub merge_bytes: Bytes,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Choice {
    Keep,
    Evict,
    Move,
}

/// Exact minimum of the eviction + merge objective by enumerating every
/// keep/evict/move assignment of the movable tensors (`3^M` of them) in
/// ascending cost and returning the first whose holes admit a packing of the
/// moved and new tensors. Kept tensors and fixed regions stay where they are;
/// moved tensors may land anywhere free, including their old spot.
///
/// Costs are accumulated exactly like [`super::objective`], so a heuristic
/// plan with the same choice has a bit-identical objective.
pub fn brute_force_oracle(
    regions: &[PlanRegion],
    new_tensors: &[NewTensor],
    candidates: &[EvictionCandidate],
    intra_copy_bandwidth: BytesPerSecond,
) -> Result<OracleSolution, OracleError> {
    let movable: Vec<TensorId> = regions
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
    if candidates.len() > ORACLE_MAX_RESIDENT || new_tensors.len() > ORACLE_MAX_NEW {
        return Err(OracleError::InstanceTooLarge {
            resident: candidates.len(),
            new: new_tensors.len(),
        });
    }
    // Movable tensors without a candidate entry can only be kept.
    let m = candidates.len();
    let combos = 3usize.pow(m as u32);
    let decode = |mut code: usize| -> Vec<Choice> {
        (0..m)
            .map(|_| {
                let c = match code % 3 {
                    0 => Choice::Keep,
                    1 => Choice::Evict,
                    _ => Choice::Move,
                };
                code /= 3;
                c
            })
            .collect()
    };

    let mut ranked: Vec<(Seconds, usize)> = (0..combos)
        .map(|code| {
            let choices = decode(code);
            let mut total = 0.0;
            for (c, ch) in candidates.iter().zip(&choices) {
                match ch {
                    Choice::Evict => total += c.cost,
                    Choice::Move => total += merge_seconds(c.size, intra_copy_bandwidth),
                    Choice::Keep => {}
                }
            }
            (total, code)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut new_sizes: Vec<Bytes> = new_tensors.iter().map(|t| t.size).collect();
    new_sizes.sort_unstable_by(|a, b| b.cmp(a));
    let pool_bytes: Bytes = regions
        .iter()
        .filter(|r| !matches!(r.kind, PlanKind::Fixed))
        .map(|r| r.size)
        .sum();
    if new_sizes.iter().sum::<Bytes>() > pool_bytes {
        return Err(OracleError::Infeasible);
    }

    for (objective, code) in ranked {
        let choices = decode(code);
        let choice_of = |id: TensorId| {
            candidates
                .iter()
                .position(|c| c.tensor == id)
                .map_or(Choice::Keep, |i| choices[i])
        };
        let mut holes = Vec::new();
        let mut run = 0;
        let mut items = new_sizes.clone();
        for r in regions {
            let open = match r.kind {
                PlanKind::Free => true,
                PlanKind::Fixed => false,
                PlanKind::Movable(id) => match choice_of(id) {
                    Choice::Keep => false,
                    Choice::Evict => true,
                    Choice::Move => {
                        items.push(r.size);
                        true
                    }
                },
            };
            if open {
                run += r.size;
            } else if run > 0 {
                holes.push(run);
                run = 0;
            }
        }
        if run > 0 {
            holes.push(run);
        }
        if fits(&mut items, &mut holes) {
            let mut evictions = BTreeSet::new();
            let mut relocations = BTreeSet::new();
            let mut merge_bytes = 0;
            for (c, ch) in candidates.iter().zip(&choices) {
                match ch {
                    Choice::Evict => {
                        evictions.insert(c.tensor);
                    }
                    Choice::Move => {
                        relocations.insert(c.tensor);
                        merge_bytes += c.size;
                    }
                    Choice::Keep => {}
                }
            }
            return Ok(OracleSolution {
                objective,
                evictions,
                relocations,
                merge_bytes,
            });
        }
    }
    Err(OracleError::Infeasible)
}

/// Exact bin packing feasibility by depth-first search.
fn fits(items: &mut [Bytes], bins: &mut [Bytes]) -> bool {
    if items.iter().sum::<Bytes>() > bins.iter().sum::<Bytes>() {
        return false;
    }
    items.sort_unstable_by(|a, b| b.cmp(a));
    bins.sort_unstable_by(|a, b| b.cmp(a));
    if let (Some(&big), Some(&room)) = (items.first(), bins.first()) {
        if big > room {
            return false;
        }
    }
    place(items, bins)
}

fn place(items: &[Bytes], bins: &mut [Bytes]) -> bool {
    let Some((&item, rest)) = items.split_first() else {
        return true;
    };
    for i in 0..bins.len() {
        if bins[i] < item || bins[..i].contains(&bins[i]) {
            continue;
        }
        bins[i] -= item;
        let ok = place(rest, bins);
        bins[i] += item;
        if ok {
            return true;
        }
    }
    false
}
