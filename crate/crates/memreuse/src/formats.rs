//! On-disk formats: model catalogs (JSON) and request traces (JSONL).
//!
//! Every file carries a `format_version`. Traces put it on a header line:
//!
//! ```text
//! {"format_version":1}
//! {"t":0.81,"model":"opt1.3B","prompt_tokens":211,"output_tokens":97,"dataset":"alpaca"}
//! ```

use std::collections::BTreeMap;
use std::io::BufRead;

use memreuse_core::model::{ElementType, ModelError, ModelLocation, ModelSpec, TensorSpec};
use memreuse_core::workload::default_architectures;
use memreuse_core::{Bytes, InferenceRequest, Seconds};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("missing {{\"format_version\": ...}} header line")]
    MissingHeader,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duplicate model {0:?}")]
    DuplicateModel(String),
    #[error("line {line}: unknown model {model:?}")]
    UnknownModel { line: usize, model: String },
    #[error("line {line}: arrival time {t} is not after the previous request")]
    Unordered { line: usize, t: Seconds },
    #[error("line {line}: token counts must be positive")]
    ZeroTokens { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_version(v: u32) -> Result<(), FormatError> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(FormatError::Version(v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogFile {
    pub format_version: u32,
    pub models: Vec<CatalogModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogModel {
    pub model_id: String,
    /// KV cache bytes per token.
    pub bytes_per_token: Bytes,
    #[serde(default = "one")]
    pub latency_sensitivity: f64,
    #[serde(default)]
    pub location: ModelLocation,
    pub tensors: Vec<CatalogTensor>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogTensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub dtype: ElementType,
}

impl CatalogFile {
    /// The built-in eight-model catalog with fp16 weights.
    pub fn builtin() -> Self {
        let models = default_architectures()
            .into_iter()
            .map(|(id, arch)| CatalogModel {
                model_id: id.into(),
                bytes_per_token: arch.kv_bytes_per_token(),
                latency_sensitivity: 1.0,
                location: ModelLocation::ModelCache,
                tensors: arch
                    .tensor_shapes()
                    .into_iter()
                    .map(|(name, shape)| CatalogTensor {
                        name,
                        shape,
                        dtype: ElementType::F16,
                    })
                    .collect(),
            })
            .collect();
        CatalogFile {
            format_version: FORMAT_VERSION,
            models,
        }
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|source| FormatError::Json { line: 0, source })?;
        check_version(file.format_version)?;
        Ok(file)
    }

    pub fn to_models(&self) -> Result<Vec<ModelSpec>, FormatError> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::with_capacity(self.models.len());
        for m in &self.models {
            if seen.insert(m.model_id.as_str(), ()).is_some() {
                return Err(FormatError::DuplicateModel(m.model_id.clone()));
            }
            let tensors = m
                .tensors
                .iter()
                .map(|t| TensorSpec::new(&m.model_id, &t.name, &t.shape, t.dtype))
                .collect();
            let spec = ModelSpec::new(&m.model_id, tensors, m.bytes_per_token)?
                .with_sensitivity(m.latency_sensitivity)?
                .with_location(m.location);
            out.push(spec);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
}

/// One trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub t: Seconds,
    pub model: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub dataset: String,
}

pub fn write_trace(trace: &[InferenceRequest]) -> String {
    let mut out = serde_json::to_string(&Header {
        format_version: FORMAT_VERSION,
    })
    .unwrap();
    out.push('\n');
    for r in trace {
        let line = TraceLine {
            t: r.arrival_time,
            model: r.model_id.clone(),
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
            dataset: r.dataset.clone(),
        };
        out.push_str(&serde_json::to_string(&line).unwrap());
        out.push('\n');
    }
    out
}

/// Raw trace lines after the header. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn read_trace_lines(reader: impl BufRead) -> Result<Vec<(usize, TraceLine)>, FormatError> {
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (_, header) = lines.next().ok_or(FormatError::MissingHeader)?;
    let header: Header = serde_json::from_str(&header?).map_err(|_| FormatError::MissingHeader)?;
    check_version(header.format_version)?;
    lines
        .map(|(n, l)| {
            let line: TraceLine = serde_json::from_str(&l?)
                .map_err(|source| FormatError::Json { line: n, source })?;
            Ok((n, line))
        })
        .collect()
}

/// Reads and validates a trace against a catalog: known models, strictly
/// increasing times, positive token counts. Request ids are line order.
pub fn read_trace(
    reader: impl BufRead,
    models: &[ModelSpec],
) -> Result<Vec<InferenceRequest>, FormatError> {
    let mut last = f64::NEG_INFINITY;
    let mut out = Vec::new();
    for (i, (n, line)) in read_trace_lines(reader)?.into_iter().enumerate() {
        if !models.iter().any(|m| m.model_id == line.model) {
            return Err(FormatError::UnknownModel {
                line: n,
                model: line.model,
            });
        }
        if !(line.t > last) {
            return Err(FormatError::Unordered { line: n, t: line.t });
        }
        if line.prompt_tokens == 0 || line.output_tokens == 0 {
            return Err(FormatError::ZeroTokens { line: n });
        }
        last = line.t;
        out.push(InferenceRequest {
            request_id: i as u64,
            model_id: line.model,
            arrival_time: line.t,
            prompt_tokens: line.prompt_tokens,
            output_tokens: line.output_tokens,
            dataset: line.dataset,
            batch_lane: 0,
        });
    }
    Ok(out)
}
