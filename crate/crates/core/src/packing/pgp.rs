use alloc::collections::VecDeque;
use alloc::vec::Vec;

use super::{NewTensor, PlanRegion};
use crate::Bytes;

/// How [`try_packing`] decides that a tensor does not fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TryPackingRule {
    /// Fail when the tensor exceeds the remaining capacity of the subspace it
    /// is steered to.
    #[default]
    Functional,
    /// Fail when the tensor is at least as large as the smaller of the two
    /// remaining capacities. Stricter; kept for comparison.
    Literal,
}

/// A contiguous run of regions `first..=last` inside the slice handed to
/// [`partitioned_gain_packing`]. Both ends are free regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subspace {
    pub first: usize,
    pub last: usize,
    /// Free bytes inside.
    pub capacity: Bytes,
    /// Allocated bytes inside, i.e. the cost of merging all of it.
    pub max_merge_cost: Bytes,
}

impl Subspace {
    fn new(regions: &[PlanRegion], first: usize, last: usize) -> Self {
        let mut capacity = 0;
        let mut max_merge_cost = 0;
        for r in &regions[first..=last] {
            if r.is_free() {
                capacity += r.size;
            } else {
                max_merge_cost += r.size;
            }
        }
        Subspace {
            first,
            last,
            capacity,
            max_merge_cost,
        }
    }
}

/// A final subspace and the tensors packed into it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub subspace: Subspace,
    pub tensors: Vec<NewTensor>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgpResult {
    /// Sorted by position.
    pub allocations: Vec<Allocation>,
    /// Bytes of allocated regions still inside some final subspace.
    pub merge_cost: Bytes,
}

/// Splits size-descending `tensors` between two subspaces with free
/// capacities `c1` and `c2`. Each tensor goes to the side with more room
/// left (ties to the first). Returns `None` on failure. An empty list always
/// splits, so subspaces that receive no tensors are split down to their free
/// regions and never count towards the merge cost.
pub fn try_packing(
    tensors: &[NewTensor],
    mut c1: Bytes,
    mut c2: Bytes,
    rule: TryPackingRule,
) -> Option<(Vec<NewTensor>, Vec<NewTensor>)> {
    let (mut t1, mut t2) = (Vec::new(), Vec::new());
    for t in tensors {
        if rule == TryPackingRule::Literal && t.size >= c1.min(c2) {
            return None;
        }
        let (side, cap) = if c1 >= c2 {
            (&mut t1, &mut c1)
        } else {
            (&mut t2, &mut c2)
        };
        if t.size > *cap {
            return None;
        }
        *cap -= t.size;
        side.push(*t);
    }
    Some((t1, t2))
}

/// Allocated runs strictly inside a subspace: `(first, last, bytes)`.
fn partition_points(regions: &[PlanRegion], s: &Subspace) -> Vec<(usize, usize, Bytes)> {
    let mut points = Vec::new();
    let mut i = s.first;
    while i <= s.last {
        if regions[i].is_free() {
            i += 1;
            continue;
        }
        let start = i;
        let mut gain = 0;
        while i <= s.last && !regions[i].is_free() {
            gain += regions[i].size;
            i += 1;
        }
        points.push((start, i - 1, gain));
    }
    points
}

/// Partitioned-gain packing over `regions`, which must begin and end with a
/// free region and contain no fixed regions.
///
/// Starts from merging every allocated region (`ℳ` = all allocated bytes).
/// A pending subspace is split at the allocated run with the largest gain for
/// which [`try_packing`] succeeds; its bytes are subtracted from `ℳ` and both
/// halves are queued. Subspaces that cannot be split are final.
pub fn partitioned_gain_packing(
    tensors: &[NewTensor],
    regions: &[PlanRegion],
    rule: TryPackingRule,
) -> PgpResult {
    if regions.is_empty() {
        return PgpResult {
            allocations: Vec::new(),
            merge_cost: 0,
        };
    }
    debug_assert!(regions[0].is_free() && regions[regions.len() - 1].is_free());
    let whole = Subspace::new(regions, 0, regions.len() - 1);
    let mut merge_cost = whole.max_merge_cost;
    let mut pending = VecDeque::from([(whole, tensors.to_vec())]);
    let mut done = Vec::new();

    while let Some((s, ts)) = pending.pop_front() {
        let mut points = partition_points(regions, &s);
        points.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut split = false;
        for (start, end, gain) in points {
            let left = Subspace::new(regions, s.first, start - 1);
            let right = Subspace::new(regions, end + 1, s.last);
            if let Some((t1, t2)) = try_packing(&ts, left.capacity, right.capacity, rule) {
                pending.push_back((left, t1));
                pending.push_back((right, t2));
                merge_cost -= gain;
                split = true;
                break;
            }
        }
        if !split {
            done.push(Allocation {
                subspace: s,
                tensors: ts,
            });
        }
    }
    done.sort_by_key(|a| a.subspace.first);
    PgpResult {
        allocations: done,
        merge_cost,
    }
}
