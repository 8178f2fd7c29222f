//! GPU affinity-aware scheduling.
//!
//! Each queued request goes to the feasible GPU where its model would load
//! fastest, given how many of its tensors that GPU still holds. A chosen GPU
//! is taken out of the pass; requests with no feasible GPU stay queued.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{GpuSpec, ModelSpec};
use crate::{Bytes, Seconds};

/// Scheduler's view of one worker, taken at decision time.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GpuSnapshot {
    pub gpu: GpuSpec,
    /// False while the GPU hosts an active instance.
    pub available: bool,
    pub free_bytes: Bytes,
    /// Resident bytes of each model's tensors (`S'`).
    pub reuse_size_by_model: BTreeMap<String, Bytes>,
}

impl GpuSnapshot {
    pub fn reuse_size(&self, model_id: &str) -> Bytes {
        self.reuse_size_by_model.get(model_id).copied().unwrap_or(0)
    }
}

/// One candidate GPU considered for a request.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CandidateEstimate {
    pub gpu_id: String,
    pub estimated_load_time: Seconds,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Assignment {
    /// Position of the request in the input list.
    pub index: usize,
    pub model_id: String,
    pub gpu_id: String,
    pub estimated_load_time: Seconds,
    pub reuse_bytes: Bytes,
}

/// Per-request record of the decision, for the scheduling log.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecisionTrace {
    pub index: usize,
    pub model_id: String,
    pub candidates: Vec<CandidateEstimate>,
    pub chosen: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleDecision {
    pub assignments: Vec<Assignment>,
    /// Input positions left queued.
    pub deferred: Vec<usize>,
    pub trace: Vec<DecisionTrace>,
}

/// `(S − S') / B`, where `B` depends on where the model's weights live.
pub fn estimate_load_time(model: &ModelSpec, reuse_size: Bytes, gpu: &GpuSpec) -> Seconds {
    let missing = model.total_size.saturating_sub(reuse_size);
    missing as f64 / gpu.load_bandwidth(model.location)
}

/// KV headroom a model needs besides its weights: one block per batch lane.
pub fn min_kv_headroom(model: &ModelSpec, batch_size: u32, block_size_tokens: u32) -> Bytes {
    batch_size as Bytes * block_size_tokens as Bytes * model.bytes_per_token
}

/// The GPU is idle and its pool can hold the model plus `headroom`.
pub fn can_run(model: &ModelSpec, snapshot: &GpuSnapshot, headroom: Bytes) -> bool {
    snapshot.available && snapshot.gpu.pool_size >= model.total_size + headroom
}

/// Greedy affinity-aware assignment of `requests` (model ids in queue
/// order). Ties on estimated time go to the smallest `gpu_id`. Unknown
/// models are deferred.
pub fn schedule(
    requests: &[&str],
    catalog: &BTreeMap<String, ModelSpec>,
    snapshots: &[GpuSnapshot],
    headroom: impl Fn(&ModelSpec) -> Bytes,
) -> ScheduleDecision {
    let mut pool: Vec<&GpuSnapshot> = snapshots.iter().collect();
    pool.sort_by(|a, b| a.gpu.gpu_id.cmp(&b.gpu.gpu_id));
    let mut decision = ScheduleDecision::default();
    for (index, model_id) in requests.iter().enumerate() {
        let Some(model) = catalog.get(*model_id) else {
            decision.deferred.push(index);
            decision.trace.push(DecisionTrace {
                index,
                model_id: String::from(*model_id),
                candidates: Vec::new(),
                chosen: None,
            });
            continue;
        };
        let need = headroom(model);
        let mut best: Option<(usize, Seconds)> = None;
        let mut candidates = Vec::new();
        for (i, snap) in pool.iter().enumerate() {
            if !can_run(model, snap, need) {
                continue;
            }
            let t = estimate_load_time(model, snap.reuse_size(model_id), &snap.gpu);
            candidates.push(CandidateEstimate {
                gpu_id: snap.gpu.gpu_id.clone(),
                estimated_load_time: t,
            });
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
        let chosen = best.map(|(i, t)| {
            let snap = pool.remove(i);
            decision.assignments.push(Assignment {
                index,
                model_id: model.model_id.clone(),
                gpu_id: snap.gpu.gpu_id.clone(),
                estimated_load_time: t,
                reuse_bytes: snap.reuse_size(model_id),
            });
            snap.gpu.gpu_id.clone()
        });
        if chosen.is_none() {
            decision.deferred.push(index);
        }
        decision.trace.push(DecisionTrace {
            index,
            model_id: model.model_id.clone(),
            candidates,
            chosen,
        });
    }
    decision
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelLocation, TensorSpec};
    use crate::GB;
    use alloc::vec;

    fn gpu(id: &str, pool: Bytes) -> GpuSpec {
        GpuSpec {
            gpu_id: id.into(),
            pool_size: pool,
            pcie_bandwidth: 24.0 * GB as f64,
            intra_copy_bandwidth: 600.0 * GB as f64,
            store_bandwidth: 4.0 * GB as f64,
        }
    }

    fn model(id: &str, size: Bytes) -> ModelSpec {
        ModelSpec::new(id, vec![TensorSpec::blob(id, "w", size)], 1).unwrap()
    }

    fn snap(g: GpuSpec, reuse: &[(&str, Bytes)]) -> GpuSnapshot {
        GpuSnapshot {
            free_bytes: g.pool_size,
            gpu: g,
            available: true,
            reuse_size_by_model: reuse.iter().map(|(m, b)| (String::from(*m), *b)).collect(),
        }
    }

    #[test]
    fn load_time_formula() {
        let g = gpu("g", 80 * GB);
        assert_eq!(estimate_load_time(&model("m", 16 * GB), 4 * GB, &g), 0.5);
        assert_eq!(estimate_load_time(&model("m", 16 * GB), 16 * GB, &g), 0.0);
        let stored = model("s", 8 * GB).with_location(ModelLocation::ModelStore);
        assert_eq!(estimate_load_time(&stored, 0, &g), 2.0);
    }

    #[test]
    fn can_run_boundaries() {
        let s = snap(gpu("g", 24 * GB), &[]);
        assert!(can_run(&model("m", 20 * GB), &s, 2 * GB));
        assert!(!can_run(&model("m", 30 * GB), &s, 0));
        assert!(can_run(&model("m", 22 * GB), &s, 2 * GB));
        let busy = GpuSnapshot {
            available: false,
            ..s
        };
        assert!(!can_run(&model("m", GB), &busy, 0));
    }

    #[test]
    fn picks_the_gpu_with_more_reuse_and_removes_it() {
        let catalog: BTreeMap<_, _> = [("a", 16 * GB), ("b", 16 * GB)]
            .into_iter()
            .map(|(m, s)| (String::from(m), model(m, s)))
            .collect();
        let snaps = [
            snap(gpu("g0", 24 * GB), &[]),
            snap(gpu("g1", 24 * GB), &[("a", 10 * GB)]),
        ];
        let d = schedule(&["a", "a", "b"], &catalog, &snaps, |_| 0);
        assert_eq!(d.assignments.len(), 2);
        assert_eq!(d.assignments[0].gpu_id, "g1");
        assert_eq!(d.assignments[1].gpu_id, "g0");
        assert_eq!(d.deferred, vec![2]);
    }

    #[test]
    fn infeasible_requests_do_not_block_later_ones() {
        let catalog: BTreeMap<_, _> = [("big", 40 * GB), ("small", 4 * GB)]
            .into_iter()
            .map(|(m, s)| (String::from(m), model(m, s)))
            .collect();
        let snaps = [snap(gpu("g0", 24 * GB), &[])];
        let d = schedule(&["big", "small"], &catalog, &snaps, |_| 0);
        assert_eq!(d.deferred, vec![0]);
        assert_eq!(d.assignments[0].model_id, "small");
    }

    #[test]
    fn ties_go_to_smallest_gpu_id() {
        let catalog: BTreeMap<_, _> = [(String::from("a"), model("a", GB))].into_iter().collect();
        let snaps = [
            snap(gpu("g9", 24 * GB), &[]),
            snap(gpu("g10", 24 * GB), &[]),
        ];
        let d = schedule(&["a"], &catalog, &snaps, |_| 0);
        assert_eq!(d.assignments[0].gpu_id, "g10");
    }
}
