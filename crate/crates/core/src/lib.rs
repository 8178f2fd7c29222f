//! Tensor-granular GPU memory reuse for serverless LLM serving, modeled without
//! hardware.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic
//! piece of the system:
//!
//! * [`model`]: tensors, fingerprints, models, GPUs, requests and the
//!   miss-probability estimator.
//! * [`pool`]: the per-GPU unified memory pool (region list, tensor map) and
//!   its lookup/load/evict/move lifecycle.
//! * [`packing`]: the two-stage eviction + partitioned-gain packing planner,
//!   plus an exhaustive oracle for small instances.
//! * [`kv`]: on-demand KV block allocation with a free list, batched
//!   allocation and urgent reclaim.
//! * [`scheduler`]: GPU affinity-aware scheduling driven by estimated load
//!   times.
//! * [`workload`]: seeded trace generation (Gamma arrivals, locality edits,
//!   sequence-length profiles).
//! * [`sim`]: a deterministic discrete-event simulator of a serverless cluster
//!   that ties the pieces together.
//!
//! File formats, configuration and the command line live in the `memreuse`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod kv;
pub mod model;
pub mod packing;
pub mod pool;
pub mod scheduler;
pub mod sim;
pub mod workload;

mod math;

pub use model::{
    fingerprint, ElementType, GpuSpec, InferenceRequest, ModelLocation, ModelSpec, ModelStats,
    ModelStatsTable, StatsEvent, TensorId, TensorSpec,
};
pub use pool::{
    KvGrant, LoadOutcome, Pbn, PoolDump, PoolError, Region, RegionList, RegionState, ReusePool,
    TensorMap,
};

/// Byte counts. All sizes in the crate are bytes.
pub type Bytes = u64;
/// Simulated time, in seconds.
pub type Seconds = f64;
/// Transfer rates, in bytes per second.
pub type BytesPerSecond = f64;

pub const GB: Bytes = 1_000_000_000;
pub const GIB: Bytes = 1 << 30;
pub const MIB: Bytes = 1 << 20;
