use alloc::string::String;
use alloc::vec::Vec;

use super::Mode;
use crate::math;
use crate::scheduler::CandidateEstimate;
use crate::{Bytes, Seconds};

/// Timeline of one served request.
///
/// `ttft = queued_time + t_init + t_load + t_profile + t_prefill`. The three
/// cold-start phases are non-zero only for requests that started their
/// instance.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RequestRecord {
    pub request_id: u64,
    pub model_id: String,
    pub gpu_id: String,
    pub dataset: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub cold: bool,
    pub t_arrival: Seconds,
    /// Start of the batch that served the request.
    pub t_scheduled: Seconds,
    pub queued_time: Seconds,
    pub t_init: Seconds,
    pub t_load: Seconds,
    /// Part of `t_load` spent on transfers.
    pub t_load_transfer: Seconds,
    /// Part of `t_load` spent relocating resident tensors.
    pub t_load_merge: Seconds,
    pub t_profile: Seconds,
    pub t_prefill: Seconds,
    pub ttft: Seconds,
    pub t_finish: Seconds,
    /// Load volume, attributed to the request that triggered the load.
    pub bytes_transferred: Bytes,
    pub bytes_merged: Bytes,
    /// True if the pool could not supply this request's KV blocks.
    pub kv_exhausted: bool,
}

/// One model instance from start to termination.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstanceRecord {
    pub gpu_id: String,
    pub model_id: String,
    pub t_start: Seconds,
    pub t_ready: Seconds,
    pub t_end: Seconds,
    pub t_load: Seconds,
    pub bytes_transferred: Bytes,
    pub bytes_merged: Bytes,
    pub hit_tensors: usize,
    pub missed_tensors: usize,
    pub evicted_tensors: usize,
    pub eviction_cost: Seconds,
    pub kv_reserved_blocks: u64,
    pub batches: u64,
    pub requests: u64,
}

/// Memory left for inactive tensors when a request's batch starts:
/// pool size minus the serving model's weights minus KV space.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReusableSample {
    pub request_id: u64,
    pub t: Seconds,
    pub gpu_id: String,
    pub reusable_bytes: Bytes,
    pub kv_bytes: Bytes,
    /// Share of the pool holding tensors or KV blocks.
    pub pool_utilization: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PoolSample {
    pub t: Seconds,
    pub gpu_id: String,
    pub tensor_bytes: Bytes,
    pub kv_bytes: Bytes,
    pub free_bytes: Bytes,
    pub utilization: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum KvSource {
    FreeList,
    Pool,
    Reclaim,
}

impl KvSource {
    pub fn name(self) -> &'static str {
        match self {
            KvSource::FreeList => "free_list",
            KvSource::Pool => "pool",
            KvSource::Reclaim => "reclaim",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KvAllocEvent {
    pub t: Seconds,
    pub request_id: u64,
    pub blocks: u64,
    pub source: KvSource,
}

/// One scheduling decision.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleLogEntry {
    pub t: Seconds,
    /// First queued request of the model.
    pub request_id: u64,
    pub model_id: String,
    pub candidates: Vec<CandidateEstimate>,
    pub chosen: Option<String>,
    pub deferred: bool,
}

/// Mean time per phase over served requests.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseBreakdown {
    pub queued: Seconds,
    pub init: Seconds,
    pub load: Seconds,
    pub load_transfer: Seconds,
    pub load_merge: Seconds,
    pub profile: Seconds,
    pub prefill: Seconds,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub requests: usize,
    pub served: usize,
    pub unserved: usize,
    pub cold_starts: usize,
    pub mean_ttft: Seconds,
    pub p99_ttft: Seconds,
    /// Mean `t_load` over served requests (zero for warm ones).
    pub mean_t_load: Seconds,
    pub total_bytes_transferred: Bytes,
    pub total_bytes_merged: Bytes,
    pub mean_pool_utilization: f64,
    pub mean_reusable_bytes: f64,
    pub phases: PhaseBreakdown,
    pub kv_exhausted: usize,
    pub kv_alloc_calls: u64,
    pub odkv_overhead: Seconds,
    pub decode_time: Seconds,
}

/// Everything a run produced. [`Summary`] is derived from the other fields.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunMetrics {
    pub mode: Mode,
    pub summary: Summary,
    pub records: Vec<RequestRecord>,
    pub unserved: Vec<u64>,
    pub instances: Vec<InstanceRecord>,
    pub reusable_space: Vec<ReusableSample>,
    pub timeseries: Vec<PoolSample>,
    pub schedule_log: Vec<ScheduleLogEntry>,
    pub kv_log: Vec<KvAllocEvent>,
    /// KV and decode accounting per batch.
    pub batches: Vec<BatchRecord>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchRecord {
    pub gpu_id: String,
    pub t_start: Seconds,
    pub requests: u32,
    pub kv_alloc_calls: u64,
    pub odkv_overhead: Seconds,
    pub decode_time: Seconds,
}

impl RunMetrics {
    pub fn summarize(&self) -> Summary {
        let n = self.records.len();
        let ttft: Vec<f64> = self.records.iter().map(|r| r.ttft).collect();
        let avg = |f: fn(&RequestRecord) -> f64| {
            math::mean(&self.records.iter().map(f).collect::<Vec<_>>())
        };
        Summary {
            requests: n + self.unserved.len(),
            served: n,
            unserved: self.unserved.len(),
            cold_starts: self.instances.len(),
            mean_ttft: math::mean(&ttft),
            p99_ttft: math::percentile(&ttft, 0.99),
            mean_t_load: avg(|r| r.t_load),
            total_bytes_transferred: self.records.iter().map(|r| r.bytes_transferred).sum(),
            total_bytes_merged: self.records.iter().map(|r| r.bytes_merged).sum(),
            mean_pool_utilization: math::mean(
                &self
                    .reusable_space
                    .iter()
                    .map(|s| s.pool_utilization)
                    .collect::<Vec<_>>(),
            ),
            mean_reusable_bytes: math::mean(
                &self
                    .reusable_space
                    .iter()
                    .map(|s| s.reusable_bytes as f64)
                    .collect::<Vec<_>>(),
            ),
            phases: PhaseBreakdown {
                queued: avg(|r| r.queued_time),
                init: avg(|r| r.t_init),
                load: avg(|r| r.t_load),
                load_transfer: avg(|r| r.t_load_transfer),
                load_merge: avg(|r| r.t_load_merge),
                profile: avg(|r| r.t_profile),
                prefill: avg(|r| r.t_prefill),
            },
            kv_exhausted: self.records.iter().filter(|r| r.kv_exhausted).count(),
            kv_alloc_calls: self.batches.iter().map(|b| b.kv_alloc_calls).sum(),
            odkv_overhead: self.batches.iter().map(|b| b.odkv_overhead).sum(),
            decode_time: self.batches.iter().map(|b| b.decode_time).sum(),
        }
    }
}
