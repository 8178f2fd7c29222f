//! Renders run results into the output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use memreuse_core::sim::{KvAllocEvent, PoolSample, RequestRecord, RunMetrics, ScheduleLogEntry};
use memreuse_core::{Bytes, PoolDump, Seconds};
use serde::Serialize;

use crate::FORMAT_VERSION;

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).unwrap();
    for row in rows {
        w.serialize(row).expect("flat rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

fn csv_with_headers<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("flat rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    format_version: u32,
    cell: &'a str,
    metrics: &'a RunMetrics,
}

pub fn metrics_json(cell: &str, metrics: &RunMetrics) -> Vec<u8> {
    pretty(&MetricsFile {
        format_version: FORMAT_VERSION,
        cell,
        metrics,
    })
}

pub fn requests_csv(records: &[RequestRecord]) -> Vec<u8> {
    csv_with_headers(records)
}

#[derive(Serialize)]
struct Header {
    format_version: u32,
}

/// Scheduling decisions as JSONL after a version header.
pub fn schedule_jsonl(log: &[ScheduleLogEntry]) -> Vec<u8> {
    let mut out = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
    })
    .unwrap();
    out.push(b'\n');
    for e in log {
        serde_json::to_writer(&mut out, e).unwrap();
        out.push(b'\n');
    }
    out
}

pub fn kv_alloc_csv(events: &[KvAllocEvent]) -> Vec<u8> {
    let rows = events
        .iter()
        .map(|e| (e.t, e.request_id, e.blocks, e.source.name()));
    csv_bytes(
        rows,
        &["sim_time", "request_id", "blocks_allocated", "source"],
    )
}

pub fn timeseries_csv(samples: &[PoolSample]) -> Vec<u8> {
    let rows = samples.iter().map(|s| {
        (
            s.t,
            &s.gpu_id,
            s.tensor_bytes,
            s.kv_bytes,
            s.free_bytes,
            s.utilization,
        )
    });
    csv_bytes(
        rows,
        &[
            "t",
            "gpu_id",
            "tensor_bytes",
            "kv_bytes",
            "free_bytes",
            "utilization",
        ],
    )
}

#[derive(Serialize)]
struct PoolsFile<'a> {
    format_version: u32,
    gpus: &'a BTreeMap<String, PoolDump>,
}

pub fn pools_json(pools: &BTreeMap<String, PoolDump>) -> Vec<u8> {
    pretty(&PoolsFile {
        format_version: FORMAT_VERSION,
        gpus: pools,
    })
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub cell: String,
    pub mode: String,
    pub served: usize,
    pub unserved: usize,
    pub cold_starts: usize,
    pub mean_ttft: Seconds,
    pub p99_ttft: Seconds,
    /// Mean load time per served request, split below.
    pub mean_load: Seconds,
    /// Planner compute time. Not charged in simulated time.
    pub load_compute: Seconds,
    pub load_merge: Seconds,
    pub load_transfer: Seconds,
    pub bytes_transferred: Bytes,
    pub bytes_merged: Bytes,
    pub mean_reusable_bytes: f64,
    pub kv_alloc_calls: u64,
    pub odkv_overhead: Seconds,
}

impl SummaryRow {
    pub fn new(cell: &str, m: &RunMetrics) -> Self {
        let s = &m.summary;
        SummaryRow {
            cell: cell.into(),
            mode: m.mode.name().into(),
            served: s.served,
            unserved: s.unserved,
            cold_starts: s.cold_starts,
            mean_ttft: s.mean_ttft,
            p99_ttft: s.p99_ttft,
            mean_load: s.mean_t_load,
            load_compute: 0.0,
            load_merge: s.phases.load_merge,
            load_transfer: s.phases.load_transfer,
            bytes_transferred: s.total_bytes_transferred,
            bytes_merged: s.total_bytes_merged,
            mean_reusable_bytes: s.mean_reusable_bytes,
            kv_alloc_calls: s.kv_alloc_calls,
            odkv_overhead: s.odkv_overhead,
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Vec<u8> {
    csv_with_headers(rows)
}

/// Fixed-width table for terminals: TTFT and the load breakdown in
/// milliseconds, volumes in GB.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$} {:>6} {:>6} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9} {:>10} {:>9}",
        "cell",
        "served",
        "cold",
        "ttft_ms",
        "p99_ms",
        "load_ms",
        "comp_ms",
        "merge_ms",
        "xfer_ms",
        "xfer_gb",
        "merge_gb"
    )
    .unwrap();
    let ms = |s: f64| s * 1e3;
    let gb = |b: Bytes| b as f64 / 1e9;
    for r in rows {
        writeln!(
            out,
            "{:<width$} {:>6} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>9.2} {:>9.2} {:>9.2} {:>10.2} {:>9.2}",
            r.cell,
            r.served,
            r.cold_starts,
            ms(r.mean_ttft),
            ms(r.p99_ttft),
            ms(r.mean_load),
            ms(r.load_compute),
            ms(r.load_merge),
            ms(r.load_transfer),
            gb(r.bytes_transferred),
            gb(r.bytes_merged),
        )
        .unwrap();
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    cells: &'a [String],
    files: &'a [String],
}

/// Lists what a run wrote, in write order. CSV files carry no version of
/// their own; the manifest's applies to them.
pub fn manifest_json(cells: &[String], files: &[String]) -> Vec<u8> {
    pretty(&Manifest {
        format_version: FORMAT_VERSION,
        cells,
        files,
    })
}
