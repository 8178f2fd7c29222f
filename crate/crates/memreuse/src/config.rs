//! Experiment configuration: one JSON file describing the cluster, the
//! trace and the policy cells to run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use memreuse_core::packing::{EvictionPolicy, LoadPolicy, MergePolicy};
use memreuse_core::sim::{Mode, SimConfig};
use memreuse_core::workload::{LengthProfile, Locality, TraceSpec};
use memreuse_core::Seconds;
use serde::{Deserialize, Serialize};

use crate::formats::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub sim: SimConfig,
    /// Catalog file; the built-in catalog when absent.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    pub trace: TraceSource,
    /// Policy cells; a single cell from `sim.mode`/`sim.policy` when absent.
    #[serde(default)]
    pub ablation: Option<Ablation>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    /// Generate a synthetic trace.
    Generate(TraceConfig),
    /// Read a trace JSONL file.
    File(PathBuf),
}

/// [`TraceSpec`] with optional fields filled from defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub seed: u64,
    pub num_requests: usize,
    pub locality: Locality,
    pub mean_interarrival: Seconds,
    /// Defaults to the locality level's CV.
    #[serde(default)]
    pub cv: Option<f64>,
    /// Defaults to every catalog model in catalog order.
    #[serde(default)]
    pub models: Option<Vec<String>>,
    #[serde(default)]
    pub zipf_exponent: Option<f64>,
    #[serde(default)]
    pub repeat_prob: Option<f64>,
    #[serde(default)]
    pub profiles: Option<Vec<LengthProfile>>,
}

impl TraceConfig {
    pub fn to_spec(&self, catalog_models: Vec<String>) -> TraceSpec {
        let mut spec = TraceSpec::new(
            self.seed,
            self.num_requests,
            self.locality,
            self.mean_interarrival,
            self.models.clone().unwrap_or(catalog_models),
        );
        if let Some(cv) = self.cv {
            spec.cv = cv;
        }
        if let Some(z) = self.zipf_exponent {
            spec.zipf_exponent = z;
        }
        if let Some(p) = self.repeat_prob {
            spec.repeat_prob = p;
        }
        if let Some(p) = &self.profiles {
            spec.profiles = p.clone();
        }
        spec
    }
}

/// The three load strategies compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Random eviction order, global merge.
    RandGm,
    /// Minimal-cost eviction, global merge.
    MceGm,
    /// Minimal-cost eviction, partitioned-gain packing.
    McePgp,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RandGm, Strategy::MceGm, Strategy::McePgp];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RandGm => "rand_gm",
            Strategy::MceGm => "mce_gm",
            Strategy::McePgp => "mce_pgp",
        }
    }

    /// `base` supplies the TryPacking rule; `seed` seeds random eviction.
    pub fn policy(self, base: LoadPolicy, seed: u64) -> LoadPolicy {
        let (eviction, merge) = match self {
            Strategy::RandGm => (EvictionPolicy::Random { seed }, MergePolicy::GlobalMerge),
            Strategy::MceGm => (EvictionPolicy::MinCost, MergePolicy::GlobalMerge),
            Strategy::McePgp => (EvictionPolicy::MinCost, MergePolicy::PartitionedGain),
        };
        LoadPolicy {
            eviction,
            merge,
            ..base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    Prealloc,
    OnDemand,
}

impl KvMode {
    pub const ALL: [KvMode; 2] = [KvMode::Prealloc, KvMode::OnDemand];

    pub fn name(self) -> &'static str {
        match self {
            KvMode::Prealloc => "prealloc",
            KvMode::OnDemand => "on_demand",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            KvMode::Prealloc => Mode::Reuse,
            KvMode::OnDemand => Mode::ReuseOdkv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "all_kv_modes")]
    pub kv: Vec<KvMode>,
    /// Also run the exclusive-GPU baseline.
    #[serde(default)]
    pub baseline: bool,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn all_kv_modes() -> Vec<KvMode> {
    KvMode::ALL.to_vec()
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            strategies: all_strategies(),
            kv: all_kv_modes(),
            baseline: false,
        }
    }
}

/// One simulator run of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub sim: SimConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("ablation lists must be non-empty")]
    EmptyAblation,
    #[error("ablation lists a {0} twice")]
    DuplicateAblation(&'static str),
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(ConfigFileError::Version(cfg.format_version));
        }
        if let Some(a) = &cfg.ablation {
            if a.strategies.is_empty() || a.kv.is_empty() {
                return Err(ConfigFileError::EmptyAblation);
            }
            if a.strategies.iter().collect::<BTreeSet<_>>().len() != a.strategies.len() {
                return Err(ConfigFileError::DuplicateAblation("strategy"));
            }
            if a.kv.iter().collect::<BTreeSet<_>>().len() != a.kv.len() {
                return Err(ConfigFileError::DuplicateAblation("kv mode"));
            }
        }
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = &mut self.catalog {
            fix(c);
        }
        if let TraceSource::File(f) = &mut self.trace {
            fix(f);
        }
        fix(&mut self.output_dir);
    }

    /// Cells in output order: the baseline first if requested, then
    /// strategies × KV modes in listed order.
    pub fn cells(&self) -> Vec<Cell> {
        let Some(a) = &self.ablation else {
            return vec![Cell {
                name: self.sim.mode.name().into(),
                sim: self.sim.clone(),
            }];
        };
        let mut out = Vec::new();
        if a.baseline {
            out.push(Cell {
                name: "baseline".into(),
                sim: SimConfig {
                    mode: Mode::Baseline,
                    ..self.sim.clone()
                },
            });
        }
        for s in &a.strategies {
            for k in &a.kv {
                let sim = SimConfig {
                    mode: k.mode(),
                    policy: s.policy(self.sim.policy, self.sim.seed),
                    ..self.sim.clone()
                };
                out.push(Cell {
                    name: format!("{}_{}", s.name(), k.name()),
                    sim,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"{{"format_version":1,"sim":{{"gpus":[]}},"trace":{{"file":"t.jsonl"}},"output_dir":"out"{extra}}}"#
        )
    }

    #[test]
    fn full_matrix_has_six_cells() {
        let cfg = ExperimentConfig::parse(&minimal(r#","ablation":{}"#)).unwrap();
        let cells = cfg.cells();
        let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "rand_gm_prealloc",
                "rand_gm_on_demand",
                "mce_gm_prealloc",
                "mce_gm_on_demand",
                "mce_pgp_prealloc",
                "mce_pgp_on_demand"
            ]
        );
        assert_eq!(cells[0].sim.mode, Mode::Reuse);
        assert_eq!(cells[1].sim.mode, Mode::ReuseOdkv);
        assert_eq!(cells[0].sim.policy.merge, MergePolicy::GlobalMerge);
        assert!(matches!(
            cells[0].sim.policy.eviction,
            EvictionPolicy::Random { .. }
        ));
        assert_eq!(cells[5].sim.policy, LoadPolicy::default());
    }

    #[test]
    fn no_ablation_is_one_cell() {
        let cfg = ExperimentConfig::parse(&minimal("")).unwrap();
        assert_eq!(cfg.cells().len(), 1);
        assert_eq!(cfg.cells()[0].name, "reuse_odkv");
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse(&minimal(r#","ablation":{"kv":[]}"#)),
            Err(ConfigFileError::EmptyAblation)
        ));
        assert!(matches!(
            ExperimentConfig::parse(&minimal(
                r#","ablation":{"strategies":["mce_gm","mce_gm"]}"#
            )),
            Err(ConfigFileError::DuplicateAblation(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse(&minimal(r#","bogus":1"#)),
            Err(ConfigFileError::Json(_))
        ));
        let v2 = minimal("").replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            ExperimentConfig::parse(&v2),
            Err(ConfigFileError::Version(2))
        ));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = ExperimentConfig::parse(&minimal("")).unwrap();
        cfg.resolve_paths(Path::new("/exp"));
        assert_eq!(cfg.output_dir, Path::new("/exp/out"));
        assert_eq!(cfg.trace, TraceSource::File("/exp/t.jsonl".into()));
    }
}
