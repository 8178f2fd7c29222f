//! Loads an experiment, runs its cells and writes the results.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use memreuse_core::sim::{run_with_pools, RunMetrics};
use memreuse_core::workload::generate_trace;
use memreuse_core::{InferenceRequest, ModelSpec, PoolDump};

use crate::config::{Cell, ExperimentConfig, TraceSource};
use crate::formats::{read_trace, CatalogFile};
use crate::report::{self, SummaryRow};
use crate::{read_to_string, write_atomic, Error};

pub struct Experiment {
    pub config: ExperimentConfig,
    pub catalog: Vec<ModelSpec>,
    pub trace: Vec<InferenceRequest>,
}

pub fn load_catalog(path: Option<&Path>) -> Result<Vec<ModelSpec>, Error> {
    let file = match path {
        None => CatalogFile::builtin(),
        Some(p) => CatalogFile::parse(&read_to_string(p)?).map_err(|source| Error::Format {
            path: p.to_path_buf(),
            source,
        })?,
    };
    file.to_models().map_err(|source| Error::Format {
        path: path.unwrap_or(Path::new("<builtin>")).into(),
        source,
    })
}

pub fn load_trace(path: &Path, catalog: &[ModelSpec]) -> Result<Vec<InferenceRequest>, Error> {
    let f = std::fs::File::open(path).map_err(Error::io(path))?;
    read_trace(BufReader::new(f), catalog).map_err(|source| Error::Format {
        path: path.into(),
        source,
    })
}

impl Experiment {
    /// Reads the config at `path` with relative paths resolved against its
    /// directory, then the catalog and trace it names.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut config =
            ExperimentConfig::parse(&read_to_string(path)?).map_err(|source| Error::Config {
                path: path.into(),
                source,
            })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Self::from_config(config)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self, Error> {
        let catalog = load_catalog(config.catalog.as_deref())?;
        let trace = match &config.trace {
            TraceSource::Generate(t) => {
                generate_trace(&t.to_spec(catalog.iter().map(|m| m.model_id.clone()).collect()))?
            }
            TraceSource::File(p) => load_trace(p, &catalog)?,
        };
        Ok(Experiment {
            config,
            catalog,
            trace,
        })
    }

    pub fn run_cell(&self, cell: &Cell) -> Result<CellOutput, Error> {
        let (metrics, pools) = run_with_pools(&cell.sim, &self.catalog, &self.trace)?;
        Ok(CellOutput {
            name: cell.name.clone(),
            metrics,
            pools,
        })
    }

    /// Runs every cell, one thread per cell. Results are in cell order.
    pub fn run_all(&self) -> Result<Vec<CellOutput>, Error> {
        let cells = self.config.cells();
        std::thread::scope(|s| {
            let handles: Vec<_> = cells
                .iter()
                .map(|c| s.spawn(move || self.run_cell(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("cell thread panicked"))
                .collect()
        })
    }
}

pub struct CellOutput {
    pub name: String,
    pub metrics: RunMetrics,
    pub pools: BTreeMap<String, PoolDump>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WriteOptions {
    pub dump_pools: bool,
}

/// Writes per-cell files, the summary and a manifest into `dir`. Returns
/// the written file names in order.
pub fn write_outputs(
    dir: &Path,
    outputs: &[CellOutput],
    opts: WriteOptions,
) -> Result<Vec<String>, Error> {
    let mut files = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<(), Error> {
        write_atomic(&dir.join(&name), bytes)?;
        files.push(name);
        Ok(())
    };
    for o in outputs {
        let m = &o.metrics;
        put(
            format!("{}.metrics.json", o.name),
            &report::metrics_json(&o.name, m),
        )?;
        put(
            format!("{}.requests.csv", o.name),
            &report::requests_csv(&m.records),
        )?;
        put(
            format!("{}.schedule.jsonl", o.name),
            &report::schedule_jsonl(&m.schedule_log),
        )?;
        if !m.kv_log.is_empty() {
            put(
                format!("{}.kv_alloc.csv", o.name),
                &report::kv_alloc_csv(&m.kv_log),
            )?;
        }
        if !m.timeseries.is_empty() {
            put(
                format!("{}.timeseries.csv", o.name),
                &report::timeseries_csv(&m.timeseries),
            )?;
        }
        if opts.dump_pools {
            put(
                format!("{}.pools.json", o.name),
                &report::pools_json(&o.pools),
            )?;
        }
    }
    let rows = summary_rows(outputs);
    put("summary.csv".into(), &report::summary_csv(&rows))?;
    put(
        "summary.txt".into(),
        report::summary_table(&rows).as_bytes(),
    )?;
    let cells: Vec<String> = outputs.iter().map(|o| o.name.clone()).collect();
    let mut listed = files.clone();
    listed.push("manifest.json".into());
    write_atomic(
        &dir.join("manifest.json"),
        &report::manifest_json(&cells, &listed),
    )?;
    Ok(listed)
}

pub fn summary_rows(outputs: &[CellOutput]) -> Vec<SummaryRow> {
    outputs
        .iter()
        .map(|o| SummaryRow::new(&o.name, &o.metrics))
        .collect()
}

/// Requests no cell could serve, as `(cell, request ids)`.
pub fn unserved(outputs: &[CellOutput]) -> Vec<(String, Vec<u64>)> {
    outputs
        .iter()
        .filter(|o| !o.metrics.unserved.is_empty())
        .map(|o| (o.name.clone(), o.metrics.unserved.clone()))
        .collect()
}

pub fn output_dir(config: &ExperimentConfig, overridden: Option<PathBuf>) -> PathBuf {
    overridden.unwrap_or_else(|| config.output_dir.clone())
}
