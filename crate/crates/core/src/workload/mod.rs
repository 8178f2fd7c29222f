//! Synthetic request traces.
//!
//! A trace is built in four deterministic steps, each from its own stream of
//! a ChaCha generator seeded by [`TraceSpec::seed`]:
//!
//! 1. a base model sequence from a two-state Markov chain (repeat the
//!    previous model with probability `repeat_prob`, otherwise draw from a
//!    Zipf popularity law);
//! 2. a locality edit that reorders the sequence ([`apply_locality`]);
//! 3. Gamma inter-arrival gaps with the requested mean and CV;
//! 4. per-request dataset and prompt/output lengths.

mod catalog;
mod lengths;

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Zipf};

use crate::model::InferenceRequest;
use crate::Seconds;

pub use catalog::{default_architectures, default_catalog, Architecture, SizeClass};
pub use lengths::{default_profiles, sample_lengths, LengthDist, LengthProfile};

/// How strongly requests to the same model cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Locality {
    /// No two consecutive requests to the same model.
    L1,
    /// Every run of same-model requests split in half.
    L2,
    /// Base sequence unchanged.
    L3,
    /// Pairs of runs of the same model merged into one.
    L4,
}

impl Locality {
    pub const ALL: [Locality; 4] = [Locality::L1, Locality::L2, Locality::L3, Locality::L4];

    /// Inter-arrival CV that goes with the level.
    pub fn default_cv(self) -> f64 {
        match self {
            Locality::L1 => 0.25,
            Locality::L2 => 0.5,
            Locality::L3 => 1.0,
            Locality::L4 => 2.0,
        }
    }
}

impl core::str::FromStr for Locality {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L1" | "l1" => Ok(Locality::L1),
            "L2" | "l2" => Ok(Locality::L2),
            "L3" | "l3" => Ok(Locality::L3),
            "L4" | "l4" => Ok(Locality::L4),
            _ => Err(TraceError::UnknownLocality(s.into())),
        }
    }
}

impl core::fmt::Display for Locality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("model list is empty")]
    EmptyCatalog,
    #[error("no length profiles configured")]
    NoProfiles,
    #[error("length profile {dataset}: {reason}")]
    BadProfile {
        dataset: String,
        reason: &'static str,
    },
    #[error("mean inter-arrival must be positive, got {0}")]
    BadMean(f64),
    #[error("cv must be positive, got {0}")]
    BadCv(f64),
    #[error("repeat probability must lie in [0, 1), got {0}")]
    BadRepeatProb(f64),
    #[error("zipf exponent must be positive, got {0}")]
    BadZipf(f64),
    #[error("base sequence refers to model index {0}, outside the model list")]
    BaseIndexOutOfRange(usize),
    #[error("unknown locality level {0:?}")]
    UnknownLocality(String),
    #[error("model {model} has {count} of {total} requests; they cannot be kept apart")]
    LocalityInfeasible {
        model: String,
        count: usize,
        total: usize,
    },
}

/// Everything needed to generate a trace.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceSpec {
    pub seed: u64,
    pub num_requests: usize,
    pub cv: f64,
    pub locality: Locality,
    pub mean_interarrival: Seconds,
    /// Model ids, most popular first before the seeded shuffle.
    pub models: Vec<String>,
    pub zipf_exponent: f64,
    pub repeat_prob: f64,
    pub profiles: Vec<LengthProfile>,
}

impl TraceSpec {
    pub const DEFAULT_ZIPF: f64 = 1.1;
    pub const DEFAULT_REPEAT: f64 = 0.6;

    /// Spec with the level's default CV and the default length profiles.
    pub fn new(
        seed: u64,
        num_requests: usize,
        locality: Locality,
        mean_interarrival: Seconds,
        models: Vec<String>,
    ) -> Self {
        TraceSpec {
            seed,
            num_requests,
            cv: locality.default_cv(),
            locality,
            mean_interarrival,
            models,
            zipf_exponent: Self::DEFAULT_ZIPF,
            repeat_prob: Self::DEFAULT_REPEAT,
            profiles: default_profiles(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.models.is_empty() {
            return Err(TraceError::EmptyCatalog);
        }
        if self.profiles.is_empty() {
            return Err(TraceError::NoProfiles);
        }
        for p in &self.profiles {
            for d in [&p.prompt, &p.output] {
                d.validate().map_err(|reason| TraceError::BadProfile {
                    dataset: p.dataset.clone(),
                    reason,
                })?;
            }
        }
        if !(self.mean_interarrival > 0.0 && self.mean_interarrival.is_finite()) {
            return Err(TraceError::BadMean(self.mean_interarrival));
        }
        if !(self.cv > 0.0 && self.cv.is_finite()) {
            return Err(TraceError::BadCv(self.cv));
        }
        if !(0.0..1.0).contains(&self.repeat_prob) {
            return Err(TraceError::BadRepeatProb(self.repeat_prob));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(TraceError::BadZipf(self.zipf_exponent));
        }
        Ok(())
    }
}

const STREAM_SEQUENCE: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_LENGTHS: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates a time-ordered trace.
pub fn generate_trace(spec: &TraceSpec) -> Result<Vec<InferenceRequest>, TraceError> {
    spec.validate()?;
    trace_from_base(spec, &base_sequence(spec))
}

/// Generates a trace from an externally supplied base sequence of indices
/// into `spec.models`, in place of the synthetic one. `spec.num_requests`
/// is ignored; the trace has one request per base entry.
pub fn generate_trace_from_base(
    spec: &TraceSpec,
    base: &[usize],
) -> Result<Vec<InferenceRequest>, TraceError> {
    spec.validate()?;
    if let Some(&bad) = base.iter().find(|&&m| m >= spec.models.len()) {
        return Err(TraceError::BaseIndexOutOfRange(bad));
    }
    trace_from_base(spec, base)
}

fn trace_from_base(spec: &TraceSpec, base: &[usize]) -> Result<Vec<InferenceRequest>, TraceError> {
    let sequence =
        apply_locality(base, spec.locality).map_err(|model| TraceError::LocalityInfeasible {
            model: spec.models[model].clone(),
            count: base.iter().filter(|&&m| m == model).count(),
            total: base.len(),
        })?;
    let times = arrival_times(
        base.len(),
        spec.mean_interarrival,
        spec.cv,
        &mut stream(spec.seed, STREAM_ARRIVALS),
    );

    let mut rng = stream(spec.seed, STREAM_LENGTHS);
    Ok(sequence
        .into_iter()
        .zip(times)
        .enumerate()
        .map(|(i, (model, t))| {
            let profile = &spec.profiles[rng.random_range(0..spec.profiles.len())];
            let (prompt, output) = sample_lengths(profile, &mut rng);
            InferenceRequest {
                request_id: i as u64,
                model_id: spec.models[model].clone(),
                arrival_time: t,
                prompt_tokens: prompt,
                output_tokens: output,
                dataset: profile.dataset.clone(),
                batch_lane: 0,
            }
        })
        .collect())
}

/// Model indices before locality editing.
pub fn base_sequence(spec: &TraceSpec) -> Vec<usize> {
    let mut rng = stream(spec.seed, STREAM_SEQUENCE);
    let n = spec.models.len();
    let mut rank_to_model: Vec<usize> = (0..n).collect();
    rank_to_model.shuffle(&mut rng);
    let zipf = Zipf::new(n as f64, spec.zipf_exponent).expect("validated exponent");
    let mut out: Vec<usize> = Vec::with_capacity(spec.num_requests);
    for _ in 0..spec.num_requests {
        let repeat = !out.is_empty() && rng.random_bool(spec.repeat_prob);
        let next = if repeat {
            out[out.len() - 1]
        } else {
            let rank = zipf.sample(&mut rng) as usize;
            rank_to_model[rank.clamp(1, n) - 1]
        };
        out.push(next);
    }
    out
}

/// Cumulative Gamma gaps with mean `mean` and coefficient of variation `cv`
/// (shape `1/cv²`, scale `mean·cv²`). Strictly increasing.
pub fn arrival_times<R: Rng + ?Sized>(
    n: usize,
    mean: Seconds,
    cv: f64,
    rng: &mut R,
) -> Vec<Seconds> {
    let gamma = Gamma::new(1.0 / (cv * cv), mean * cv * cv).expect("validated parameters");
    let mut t = 0.0f64;
    (0..n)
        .map(|_| {
            let next = t + gamma.sample(rng);
            t = if next > t { next } else { t.next_up() };
            t
        })
        .collect()
}

/// Maximal runs of equal values: `(value, length)`.
pub fn runs(sequence: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &m in sequence {
        match out.last_mut() {
            Some((v, len)) if *v == m => *len += 1,
            _ => out.push((m, 1)),
        }
    }
    out
}

/// Reorders a model sequence to the given locality level. The multiset of
/// models is preserved. Fails (returning the offending model) when L1 or L2
/// cannot keep one model's chunks apart.
pub fn apply_locality(sequence: &[usize], locality: Locality) -> Result<Vec<usize>, usize> {
    let base = runs(sequence);
    let chunks: Vec<(usize, usize)> = match locality {
        Locality::L3 => return Ok(sequence.to_vec()),
        Locality::L1 => base
            .iter()
            .flat_map(|&(m, len)| core::iter::repeat_n((m, 1), len))
            .collect(),
        Locality::L2 => base
            .iter()
            .flat_map(|&(m, len)| {
                let first = len.div_ceil(2);
                [(m, first), (m, len - first)]
            })
            .filter(|&(_, len)| len > 0)
            .collect(),
        Locality::L4 => return Ok(expand(&merge_run_pairs(&base))),
    };
    separate(chunks).map(|c| expand(&c))
}

fn expand(chunks: &[(usize, usize)]) -> Vec<usize> {
    chunks
        .iter()
        .flat_map(|&(m, len)| core::iter::repeat_n(m, len))
        .collect()
}

/// Each run absorbs the next later run of the same model.
fn merge_run_pairs(runs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut consumed = alloc::vec![false; runs.len()];
    let mut out = Vec::new();
    for i in 0..runs.len() {
        if consumed[i] {
            continue;
        }
        let (m, mut len) = runs[i];
        if let Some(j) = (i + 1..runs.len()).find(|&j| !consumed[j] && runs[j].0 == m) {
            consumed[j] = true;
            len += runs[j].1;
        }
        out.push((m, len));
    }
    out
}

/// Reorders chunks so no two adjacent chunks share a model, staying close
/// to the input order: a chunk that would touch its own model is held back
/// and emitted at the first opportunity; leftovers are inserted wherever
/// both neighbours differ.
fn separate(chunks: Vec<(usize, usize)>) -> Result<Vec<(usize, usize)>, usize> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(chunks.len());
    let mut held: VecDeque<(usize, usize)> = VecDeque::new();
    let last = |out: &Vec<(usize, usize)>| out.last().map(|c| c.0);
    let flush = |out: &mut Vec<(usize, usize)>, held: &mut VecDeque<(usize, usize)>| {
        while let Some(pos) = held.iter().position(|c| Some(c.0) != last(out)) {
            out.push(held.remove(pos).expect("position is valid"));
        }
    };
    for c in chunks {
        flush(&mut out, &mut held);
        if last(&out) == Some(c.0) {
            held.push_back(c);
        } else {
            out.push(c);
        }
    }
    flush(&mut out, &mut held);
    for c in held {
        let slot = (0..=out.len())
            .find(|&i| (i == 0 || out[i - 1].0 != c.0) && (i == out.len() || out[i].0 != c.0));
        match slot {
            Some(i) => out.insert(i, c),
            None => return Err(c.0),
        }
    }
    Ok(out)
}
