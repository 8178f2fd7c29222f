use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{ElementType, ModelSpec, TensorSpec};
use crate::Bytes;

/// Decoder-only transformer shape, enough to lay out its weight tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
    /// Width of the K and V projections (smaller than `hidden` with
    /// grouped-query attention).
    pub kv_dim: u64,
    pub vocab: u64,
    /// Gated MLP (separate gate and up projections).
    pub gated: bool,
    /// Output head shares the embedding matrix.
    pub tied_embeddings: bool,
}

impl Architecture {
    /// `(name, shape)` of every weight tensor.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<u64>)> {
        let (h, f, kv) = (self.hidden, self.ffn, self.kv_dim);
        let mut out = Vec::new();
        out.push((String::from("embed_tokens"), alloc::vec![self.vocab, h]));
        for l in 0..self.layers {
            let p = format!("layers.{l:02}.");
            out.push((format!("{p}input_norm"), alloc::vec![h]));
            out.push((format!("{p}attn.qkv_proj"), alloc::vec![h + 2 * kv, h]));
            out.push((format!("{p}attn.o_proj"), alloc::vec![h, h]));
            out.push((format!("{p}post_attn_norm"), alloc::vec![h]));
            let up = if self.gated { 2 * f } else { f };
            out.push((format!("{p}mlp.up_proj"), alloc::vec![up, h]));
            out.push((format!("{p}mlp.down_proj"), alloc::vec![h, f]));
        }
        out.push((String::from("final_norm"), alloc::vec![h]));
        if !self.tied_embeddings {
            out.push((String::from("lm_head"), alloc::vec![self.vocab, h]));
        }
        out
    }

    pub fn parameters(&self) -> u64 {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<u64>())
            .sum()
    }

    /// K and V for every layer at fp16: `2 · layers · hidden · 2` bytes.
    pub fn kv_bytes_per_token(&self) -> Bytes {
        2 * self.layers * self.hidden * 2
    }

    pub fn build(&self, model_id: &str) -> ModelSpec {
        let tensors = self
            .tensor_shapes()
            .iter()
            .map(|(name, shape)| TensorSpec::new(model_id, name, shape, ElementType::F16))
            .collect();
        ModelSpec::new(model_id, tensors, self.kv_bytes_per_token())
            .expect("architecture yields valid tensors")
    }
}

/// Decode-speed bucket by parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SizeClass {
    /// Up to 4B parameters.
    Small,
    /// Up to 14B.
    Medium,
    Large,
}

impl SizeClass {
    pub fn of(model: &ModelSpec) -> SizeClass {
        // fp16 weights: two bytes per parameter.
        let params = model.total_size / 2;
        if params <= 4_000_000_000 {
            SizeClass::Small
        } else if params <= 14_000_000_000 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

/// Names and shapes of the eight evaluation models, smallest last.
pub fn default_architectures() -> Vec<(&'static str, Architecture)> {
    let opt = |layers, hidden| Architecture {
        layers,
        hidden,
        ffn: 4 * hidden,
        kv_dim: hidden,
        vocab: 50272,
        gated: false,
        tied_embeddings: true,
    };
    alloc::vec![
        (
            "gpt20B",
            Architecture {
                layers: 44,
                hidden: 6144,
                ffn: 24576,
                kv_dim: 6144,
                vocab: 50432,
                gated: false,
                tied_embeddings: false,
            },
        ),
        ("opt13B", opt(40, 5120)),
        (
            "yi9B",
            Architecture {
                layers: 48,
                hidden: 4096,
                ffn: 11008,
                kv_dim: 512,
                vocab: 64000,
                gated: true,
                tied_embeddings: false,
            },
        ),
        (
            "llama8B",
            Architecture {
                layers: 32,
                hidden: 4096,
                ffn: 14336,
                kv_dim: 1024,
                vocab: 128256,
                gated: true,
                tied_embeddings: false,
            },
        ),
        ("opt6.7B", opt(32, 4096)),
        (
            "llama3B",
            Architecture {
                layers: 28,
                hidden: 3072,
                ffn: 8192,
                kv_dim: 1024,
                vocab: 128256,
                gated: true,
                tied_embeddings: true,
            },
        ),
        (
            "qwen3B",
            Architecture {
                layers: 36,
                hidden: 2048,
                ffn: 11008,
                kv_dim: 256,
                vocab: 151936,
                gated: true,
                tied_embeddings: true,
            },
        ),
        ("opt1.3B", opt(24, 2048)),
    ]
}

/// The eight evaluation models with fp16 weights.
pub fn default_catalog() -> Vec<ModelSpec> {
    default_architectures()
        .iter()
        .map(|(id, a)| a.build(id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_names() {
        let nominal = [20.0, 13.0, 9.0, 8.0, 6.7, 3.0, 3.0, 1.3];
        for ((id, arch), n) in default_architectures().iter().zip(nominal) {
            let billions = arch.parameters() as f64 / 1e9;
            assert!(
                (billions / n - 1.0).abs() < 0.12,
                "{id}: {billions:.2}B vs {n}B"
            );
        }
    }

    #[test]
    fn size_mix() {
        let catalog = default_catalog();
        let classes: Vec<_> = catalog.iter().map(SizeClass::of).collect();
        assert_eq!(
            classes.iter().filter(|c| **c == SizeClass::Small).count(),
            3
        );
        assert_eq!(
            classes.iter().filter(|c| **c == SizeClass::Medium).count(),
            4
        );
        assert_eq!(
            classes.iter().filter(|c| **c == SizeClass::Large).count(),
            1
        );
        let total: Bytes = catalog.iter().map(|m| m.total_size).sum();
        assert!((120e9..140e9).contains(&(total as f64)), "{total}");
    }

    #[test]
    fn sizes_are_two_bytes_per_parameter() {
        for (id, arch) in default_architectures() {
            assert_eq!(arch.build(id).total_size, 2 * arch.parameters());
        }
    }
}
