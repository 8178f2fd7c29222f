//! Shared domain types: tensors and their fingerprints, models, GPUs,
//! requests, and the per-model miss-probability estimator.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::{Bytes, BytesPerSecond, Seconds};

/// 128-bit content fingerprint identifying a tensor across models and runs.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub u128);

impl fmt::Debug for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TensorId({:032x})", self.0)
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl core::str::FromStr for TensorId {
    type Err = core::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u128::from_str_radix(s, 16).map(TensorId)
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for TensorId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for TensorId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Element type label of a tensor. Only the per-element width matters here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ElementType {
    F32,
    F16,
    Bf16,
    I8,
    U8,
}

impl ElementType {
    pub const fn size_bytes(self) -> Bytes {
        match self {
            ElementType::F32 => 4,
            ElementType::F16 | ElementType::Bf16 => 2,
            ElementType::I8 | ElementType::U8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::F16 => "f16",
            ElementType::Bf16 => "bf16",
            ElementType::I8 => "i8",
            ElementType::U8 => "u8",
        }
    }
}

const FIELD_SEP: u8 = 0x1f;

/// Deterministic fingerprint of `(model_id, name, shape, element_type)`.
///
/// The tuple is serialized canonically (UTF-8 fields separated by `0x1F`,
/// each dimension written in decimal as its own field) and hashed with
/// XXH3-128. No per-process seed is involved, so values are stable across
/// runs and machines.
pub fn fingerprint(model_id: &str, name: &str, shape: &[u64], dtype: ElementType) -> TensorId {
    let mut buf = Vec::with_capacity(model_id.len() + name.len() + 8 + shape.len() * 8);
    buf.extend_from_slice(model_id.as_bytes());
    buf.push(FIELD_SEP);
    buf.extend_from_slice(name.as_bytes());
    buf.push(FIELD_SEP);
    buf.extend_from_slice(dtype.name().as_bytes());
    for dim in shape {
        buf.push(FIELD_SEP);
        buf.extend_from_slice(dim.to_string().as_bytes());
    }
    TensorId(xxhash_rust::xxh3::xxh3_128(&buf))
}

/// An immutable, contiguously stored parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorSpec {
    pub id: TensorId,
    pub model_id: String,
    pub name: String,
    pub size: Bytes,
}

impl TensorSpec {
    pub fn new(model_id: &str, name: &str, shape: &[u64], dtype: ElementType) -> Self {
        let elems: u64 = shape.iter().product();
        TensorSpec {
            id: fingerprint(model_id, name, shape, dtype),
            model_id: model_id.into(),
            name: name.into(),
            size: elems * dtype.size_bytes(),
        }
    }

    /// A byte-blob tensor of the given size (shape `[size]`, `u8`).
    pub fn blob(model_id: &str, name: &str, size: Bytes) -> Self {
        Self::new(model_id, name, &[size], ElementType::U8)
    }
}

/// Where the host copy of a model's weights lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelLocation {
    /// Worker-local host memory cache; loads are PCIe-bound.
    #[default]
    ModelCache,
    /// Remote/SSD store; loads are pipelined through the cache.
    ModelStore,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model id must be non-empty")]
    EmptyModelId,
    #[error("model {0} has no tensors")]
    NoTensors(String),
    #[error("tensor {name} of model {model} has zero size")]
    ZeroSizedTensor { model: String, name: String },
    #[error("tensor {name} belongs to model {owner}, not {model}")]
    ForeignTensor {
        model: String,
        name: String,
        owner: String,
    },
    #[error("duplicate tensor name {name} in model {model}")]
    DuplicateTensor { model: String, name: String },
    #[error("latency sensitivity {0} outside (0, 1]")]
    BadSensitivity(f64),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub model_id: String,
    /// Sorted by name.
    pub tensors: Vec<TensorSpec>,
    pub total_size: Bytes,
    /// Loading-latency sensitivity, in `(0, 1]`; 1 unless registered otherwise.
    pub latency_sensitivity: f64,
    pub location: ModelLocation,
    /// KV cache bytes per token (keys and values, all layers).
    pub bytes_per_token: Bytes,
}

impl ModelSpec {
    pub fn new(
        model_id: &str,
        mut tensors: Vec<TensorSpec>,
        bytes_per_token: Bytes,
    ) -> Result<Self, ModelError> {
        if model_id.is_empty() {
            return Err(ModelError::EmptyModelId);
        }
        if tensors.is_empty() {
            return Err(ModelError::NoTensors(model_id.into()));
        }
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        for t in &tensors {
            if t.size == 0 {
                return Err(ModelError::ZeroSizedTensor {
                    model: model_id.into(),
                    name: t.name.clone(),
                });
            }
            if t.model_id != model_id {
                return Err(ModelError::ForeignTensor {
                    model: model_id.into(),
                    name: t.name.clone(),
                    owner: t.model_id.clone(),
                });
            }
        }
        if let Some(w) = tensors.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(ModelError::DuplicateTensor {
                model: model_id.into(),
                name: w[0].name.clone(),
            });
        }
        let total_size = tensors.iter().map(|t| t.size).sum();
        Ok(ModelSpec {
            model_id: model_id.into(),
            tensors,
            total_size,
            latency_sensitivity: 1.0,
            location: ModelLocation::ModelCache,
            bytes_per_token,
        })
    }

    pub fn with_sensitivity(mut self, alpha: f64) -> Result<Self, ModelError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ModelError::BadSensitivity(alpha));
        }
        self.latency_sensitivity = alpha;
        Ok(self)
    }

    pub fn with_location(mut self, location: ModelLocation) -> Self {
        self.location = location;
        self
    }
}

/// A GPU worker and the bandwidths that govern its load/merge timings.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GpuSpec {
    pub gpu_id: String,
    /// Size of the unified memory pool.
    pub pool_size: Bytes,
    pub pcie_bandwidth: BytesPerSecond,
    /// Device-local copy rate used for tensor relocation.
    pub intra_copy_bandwidth: BytesPerSecond,
    pub store_bandwidth: BytesPerSecond,
}

impl GpuSpec {
    /// Effective host-to-device load bandwidth for a model stored at
    /// `location`. Store loads are pipelined through the cache, so the slower
    /// medium governs.
    pub fn load_bandwidth(&self, location: ModelLocation) -> BytesPerSecond {
        match location {
            ModelLocation::ModelCache => self.pcie_bandwidth,
            ModelLocation::ModelStore => self.store_bandwidth.min(self.pcie_bandwidth),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InferenceRequest {
    pub request_id: u64,
    pub model_id: String,
    pub arrival_time: Seconds,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    /// Dataset tag the lengths were drawn from.
    pub dataset: String,
    pub batch_lane: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StatsEvent<'a> {
    Requested { model_id: &'a str, t: Seconds },
    Evicted { model_id: &'a str, t: Seconds },
}

impl StatsEvent<'_> {
    fn time(&self) -> Seconds {
        match *self {
            StatsEvent::Requested { t, .. } | StatsEvent::Evicted { t, .. } => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("event at t={got} precedes last recorded event at t={last}")]
    OutOfOrder { last: Seconds, got: Seconds },
}

/// Per-model view of the estimator state.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelStats {
    pub model_id: String,
    /// Request times of this model still inside the history window.
    pub request_timestamps: Vec<Seconds>,
    pub miss_probability: f64,
    pub load_bandwidth: BytesPerSecond,
}

/// Miss-probability estimator shared by all models on a controller.
///
/// `p_m` is the exponentially weighted share of recent requests that went to
/// model `m`: the request at age `a` (0 for the newest) carries weight
/// `decay^a`, and only the newest `window` requests are kept. With a long
/// window this equals the running counters `c_m <- decay * c_m + 1` (and
/// `c_k <- decay * c_k` for every other model), normalised by their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelStatsTable {
    decay: f64,
    window: usize,
    history: VecDeque<(String, Seconds)>,
    last_event: Option<Seconds>,
    shares: BTreeMap<String, f64>,
    bandwidth: BTreeMap<String, BytesPerSecond>,
}

impl Default for ModelStatsTable {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DECAY, Self::DEFAULT_WINDOW)
    }
}

impl ModelStatsTable {
    pub const DEFAULT_DECAY: f64 = 0.95;
    /// `0.95^512` is below `1e-11`, so truncation is invisible.
    pub const DEFAULT_WINDOW: usize = 512;

    pub fn new(decay: f64, window: usize) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
        assert!(window > 0, "window must be positive");
        ModelStatsTable {
            decay,
            window,
            history: VecDeque::new(),
            last_event: None,
            shares: BTreeMap::new(),
            bandwidth: BTreeMap::new(),
        }
    }

    pub fn set_load_bandwidth(&mut self, model_id: &str, bandwidth: BytesPerSecond) {
        self.bandwidth.insert(model_id.into(), bandwidth);
    }

    pub fn load_bandwidth(&self, model_id: &str) -> Option<BytesPerSecond> {
        self.bandwidth.get(model_id).copied()
    }

    pub fn record(&mut self, event: StatsEvent<'_>) -> Result<(), StatsError> {
        let t = event.time();
        if let Some(last) = self.last_event {
            if t < last {
                return Err(StatsError::OutOfOrder { last, got: t });
            }
        }
        self.last_event = Some(t);
        if let StatsEvent::Requested { model_id, t } = event {
            self.history.push_back((model_id.into(), t));
            while self.history.len() > self.window {
                self.history.pop_front();
            }
            self.recompute_shares();
        }
        Ok(())
    }

    fn recompute_shares(&mut self) {
        self.shares.clear();
        let mut weight = 1.0;
        let mut total = 0.0;
        for (model, _) in self.history.iter().rev() {
            *self.shares.entry(model.clone()).or_insert(0.0) += weight;
            total += weight;
            weight *= self.decay;
        }
        if total > 0.0 {
            for share in self.shares.values_mut() {
                *share = (*share / total).clamp(0.0, 1.0);
            }
        }
    }

    /// `p_m`; zero for a model never seen inside the window.
    pub fn miss_probability(&self, model_id: &str) -> f64 {
        self.shares.get(model_id).copied().unwrap_or(0.0)
    }

    pub fn stats(&self, model_id: &str) -> ModelStats {
        ModelStats {
            model_id: model_id.into(),
            request_timestamps: self
                .history
                .iter()
                .filter(|(m, _)| m == model_id)
                .map(|&(_, t)| t)
                .collect(),
            miss_probability: self.miss_probability(model_id),
            load_bandwidth: self.load_bandwidth(model_id).unwrap_or(0.0),
        }
    }
}

/// Pure form of [`ModelStatsTable::record`]: returns the updated table.
pub fn update_model_stats(
    table: &ModelStatsTable,
    event: StatsEvent<'_>,
) -> Result<ModelStatsTable, StatsError> {
    let mut next = table.clone();
    next.record(event)?;
    Ok(next)
}
