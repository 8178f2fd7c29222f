use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memreuse::bench::bench_packing;
use memreuse::config::TraceConfig;
use memreuse::formats::{read_trace_lines, write_trace};
use memreuse::report;
use memreuse::runner::{self, load_catalog, Experiment, WriteOptions};
use memreuse::{write_atomic, Error};
use memreuse_core::packing::{BenchParams, LoadPolicy, TryPackingRule};
use memreuse_core::workload::{generate_trace, generate_trace_from_base, Locality};

/// Tensor-level GPU memory reuse simulator.
#[derive(Parser)]
#[command(name = "memreuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic request trace (JSONL).
    GenTrace(GenTrace),
    /// Run every policy cell of an experiment config.
    Run(Run),
    /// Compare the packing heuristic with the exhaustive oracle.
    BenchPacking(BenchPacking),
    /// Run one cell and write the final pool state of every GPU.
    DumpPool(DumpPool),
}

#[derive(Args)]
struct GenTrace {
    #[arg(long)]
    seed: u64,
    /// Number of requests (ignored with --base).
    #[arg(long)]
    n: usize,
    /// Locality level L1..L4.
    #[arg(long, default_value = "L3")]
    locality: Locality,
    /// Inter-arrival coefficient of variation; the level's default if unset.
    #[arg(long)]
    cv: Option<f64>,
    /// Mean inter-arrival time in seconds.
    #[arg(long, default_value_t = 10.0)]
    mean_interarrival: f64,
    /// Catalog JSON; the built-in catalog if unset.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Trace JSONL whose model sequence replaces the synthetic one.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Output file; stdout if unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each cell's final pool state.
    #[arg(long)]
    dump_pool: bool,
    /// Sample pool utilization every this many simulated seconds.
    #[arg(long, value_name = "SECONDS")]
    emit_timeseries: Option<f64>,
    /// Write the per-step KV allocation log.
    #[arg(long)]
    kv_log: bool,
}

#[derive(Args)]
struct BenchPacking {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Largest number of resident tensors per instance.
    #[arg(long, default_value_t = BenchParams::default().max_resident)]
    max_resident: usize,
    /// Largest number of new tensors per instance.
    #[arg(long, default_value_t = BenchParams::default().max_new)]
    max_new: usize,
    #[arg(long, default_value_t = BenchParams::default().max_tensor)]
    max_tensor: u64,
    #[arg(long, default_value_t = BenchParams::default().max_gap)]
    max_gap: u64,
    /// Use the literal TryPacking guard instead of the functional one.
    #[arg(long)]
    literal: bool,
    /// Output CSV; stdout if unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpPool {
    #[arg(long)]
    config: PathBuf,
    /// Cell name; the first cell if unset.
    #[arg(long)]
    cell: Option<String>,
    /// Output file; stdout if unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&PathBuf>, bytes: &[u8]) -> Result<(), Error> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(Error::io("<stdout>".as_ref()))
        }
    }
}

fn gen_trace(a: GenTrace) -> Result<(), Error> {
    let catalog = load_catalog(a.catalog.as_deref())?;
    let models: Vec<String> = catalog.iter().map(|m| m.model_id.clone()).collect();
    let cfg = TraceConfig {
        seed: a.seed,
        num_requests: a.n,
        locality: a.locality,
        mean_interarrival: a.mean_interarrival,
        cv: a.cv,
        models: None,
        zipf_exponent: None,
        repeat_prob: None,
        profiles: None,
    };
    let spec = cfg.to_spec(models.clone());
    let trace = match &a.base {
        None => generate_trace(&spec)?,
        Some(path) => {
            let f = std::fs::File::open(path).map_err(Error::io(path))?;
            let lines =
                read_trace_lines(std::io::BufReader::new(f)).map_err(|source| Error::Format {
                    path: path.clone(),
                    source,
                })?;
            let base = lines
                .into_iter()
                .map(|(n, l)| {
                    models
                        .iter()
                        .position(|m| *m == l.model)
                        .ok_or_else(|| Error::Format {
                            path: path.clone(),
                            source: memreuse::formats::FormatError::UnknownModel {
                                line: n,
                                model: l.model,
                            },
                        })
                })
                .collect::<Result<Vec<usize>, Error>>()?;
            generate_trace_from_base(&spec, &base)?
        }
    };
    emit(a.out.as_ref(), write_trace(&trace).as_bytes())
}

fn run(a: Run) -> Result<(), Error> {
    let mut exp = Experiment::load(&a.config)?;
    if let Some(i) = a.emit_timeseries {
        exp.config.sim.timeseries_interval = Some(i);
    }
    if a.kv_log {
        exp.config.sim.log_kv_allocations = true;
    }
    let outputs = exp.run_all()?;
    let dir = runner::output_dir(&exp.config, a.out);
    runner::write_outputs(
        &dir,
        &outputs,
        WriteOptions {
            dump_pools: a.dump_pool,
        },
    )?;
    print!("{}", report::summary_table(&runner::summary_rows(&outputs)));
    let unserved = runner::unserved(&outputs);
    if let Some((cell, ids)) = unserved.first() {
        return Err(Error::Infeasible(format!(
            "{} request(s) in cell {cell} fit on no GPU (first: {}); outputs written to {}",
            ids.len(),
            ids[0],
            dir.display()
        )));
    }
    Ok(())
}

fn bench(a: BenchPacking) -> Result<(), Error> {
    let params = BenchParams {
        max_resident: a.max_resident,
        max_new: a.max_new,
        max_tensor: a.max_tensor,
        max_gap: a.max_gap,
        ..BenchParams::default()
    };
    let rule = if a.literal {
        TryPackingRule::Literal
    } else {
        TryPackingRule::Functional
    };
    let report = bench_packing(
        a.count,
        a.seed,
        &params,
        &LoadPolicy {
            rule,
            ..LoadPolicy::default()
        },
    )?;
    emit(a.out.as_ref(), &report.csv())?;
    eprintln!("{}", report.summary());
    Ok(())
}

fn dump_pool(a: DumpPool) -> Result<(), Error> {
    let exp = Experiment::load(&a.config)?;
    let cells = exp.config.cells();
    let cell = match &a.cell {
        None => &cells[0],
        Some(name) => cells.iter().find(|c| &c.name == name).ok_or_else(|| {
            let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
            Error::Usage(format!("no cell {name:?}; cells are {names:?}"))
        })?,
    };
    let out = exp.run_cell(cell)?;
    emit(a.out.as_ref(), &report::pools_json(&out.pools))
}

fn main() -> ExitCode {
    // Usage errors are config errors (1); 2 is reserved for infeasibility.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Run(a) => run(a),
        Command::BenchPacking(a) => bench(a),
        Command::DumpPool(a) => dump_pool(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
