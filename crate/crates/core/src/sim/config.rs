use alloc::string::String;
use alloc::vec::Vec;

use crate::kv::{ALLOWED_BLOCK_SIZES, DEFAULT_BLOCK_SIZE};
use crate::model::GpuSpec;
use crate::packing::LoadPolicy;
use crate::workload::SizeClass;
use crate::Seconds;

/// Memory management strategy of the simulated platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Exclusive GPUs: weights are discarded at instance end and KV space is
    /// reserved up front.
    Baseline,
    /// Weights stay resident for reuse; KV space reserved up front.
    Reuse,
    /// Weights stay resident and KV blocks are allocated on demand.
    #[default]
    ReuseOdkv,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Reuse, Mode::ReuseOdkv];

    pub fn retains_weights(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn on_demand_kv(self) -> bool {
        matches!(self, Mode::ReuseOdkv)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Reuse => "reuse",
            Mode::ReuseOdkv => "reuse_odkv",
        }
    }
}

/// Fixed latencies of the non-load cold-start phases.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseLatencies {
    pub init: Seconds,
    pub profile: Seconds,
    pub prefill_base: Seconds,
    pub prefill_per_token: Seconds,
}

impl Default for PhaseLatencies {
    fn default() -> Self {
        PhaseLatencies {
            init: 0.5,
            profile: 0.2,
            prefill_base: 0.1,
            prefill_per_token: 0.0005,
        }
    }
}

/// Decode throughput (tokens per second) by model size class.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeRates {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for DecodeRates {
    fn default() -> Self {
        DecodeRates {
            small: 600.0,
            medium: 430.0,
            large: 225.0,
        }
    }
}

impl DecodeRates {
    pub fn rate(&self, class: SizeClass) -> f64 {
        match class {
            SizeClass::Small => self.small,
            SizeClass::Medium => self.medium,
            SizeClass::Large => self.large,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SimConfig {
    pub gpus: Vec<GpuSpec>,
    pub phases: PhaseLatencies,
    pub decode_rates: DecodeRates,
    pub keep_alive: Seconds,
    pub batch_size: u32,
    pub mode: Mode,
    pub policy: LoadPolicy,
    pub block_size_tokens: u32,
    /// Longest sequence an up-front KV reservation is sized for.
    pub max_seq_len: u32,
    /// Snapshot RPC cost per worker, paid once per scheduling pass.
    pub rpc_snapshot_latency: Seconds,
    /// Fixed cost of one on-demand KV allocation call.
    pub odkv_overhead: Seconds,
    pub seed: u64,
    /// Pool samples every this many seconds, if set.
    pub timeseries_interval: Option<Seconds>,
    pub log_kv_allocations: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            gpus: Vec::new(),
            phases: PhaseLatencies::default(),
            decode_rates: DecodeRates::default(),
            keep_alive: 240.0,
            batch_size: 8,
            mode: Mode::default(),
            policy: LoadPolicy::default(),
            block_size_tokens: DEFAULT_BLOCK_SIZE,
            max_seq_len: 2048,
            rpc_snapshot_latency: 0.002,
            odkv_overhead: 50e-6,
            seed: 0,
            timeseries_interval: None,
            log_kv_allocations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("no GPUs configured")]
    NoGpus,
    #[error("duplicate gpu id {0:?}")]
    DuplicateGpu(String),
    #[error("gpu {0:?}: pool size and bandwidths must be positive")]
    BadGpu(String),
    #[error("{0} must be finite and non-negative")]
    BadLatency(&'static str),
    #[error("batch size must be positive")]
    BadBatch,
    #[error("block size {0} tokens is not one of 8, 16, 32")]
    BadBlockSize(u32),
    #[error("max sequence length must be positive")]
    BadMaxSeq,
    #[error("decode rates must be positive")]
    BadDecodeRate,
    #[error("timeseries interval must be positive")]
    BadInterval,
    #[error("request {request} names unknown model {model:?}")]
    UnknownModel { request: u64, model: String },
    #[error("request {0} arrives before its predecessor")]
    UnorderedTrace(u64),
    #[error("duplicate model {0:?} in catalog")]
    DuplicateModel(String),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.gpus.is_empty() {
            return Err(ConfigError::NoGpus);
        }
        let mut ids: Vec<&str> = self.gpus.iter().map(|g| g.gpu_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::DuplicateGpu(w[0].into()));
        }
        for g in &self.gpus {
            let bw_ok = [g.pcie_bandwidth, g.intra_copy_bandwidth, g.store_bandwidth]
                .iter()
                .all(|b| *b > 0.0 && b.is_finite());
            if g.pool_size == 0 || !bw_ok {
                return Err(ConfigError::BadGpu(g.gpu_id.clone()));
            }
        }
        let latencies = [
            ("init", self.phases.init),
            ("profile", self.phases.profile),
            ("prefill_base", self.phases.prefill_base),
            ("prefill_per_token", self.phases.prefill_per_token),
            ("keep_alive", self.keep_alive),
            ("rpc_snapshot_latency", self.rpc_snapshot_latency),
            ("odkv_overhead", self.odkv_overhead),
        ];
        for (name, v) in latencies {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::BadLatency(name));
            }
        }
        if self.batch_size == 0 {
            return Err(ConfigError::BadBatch);
        }
        if !ALLOWED_BLOCK_SIZES.contains(&self.block_size_tokens) {
            return Err(ConfigError::BadBlockSize(self.block_size_tokens));
        }
        if self.max_seq_len == 0 {
            return Err(ConfigError::BadMaxSeq);
        }
        let r = self.decode_rates;
        if ![r.small, r.medium, r.large]
            .iter()
            .all(|x| *x > 0.0 && x.is_finite())
        {
            return Err(ConfigError::BadDecodeRate);
        }
        if let Some(i) = self.timeseries_interval {
            if !(i > 0.0 && i.is_finite()) {
                return Err(ConfigError::BadInterval);
            }
        }
        Ok(())
    }
}
