//! Deterministic discrete-event simulation of a serverless LLM cluster.
//!
//! A controller queues requests and places model instances on GPUs with the
//! affinity-aware scheduler. Each instance goes through init, load (through
//! the GPU's reuse pool), profile, then serves batches: prefill, then decode
//! with KV blocks allocated per block boundary. Idle instances are kept
//! alive for `keep_alive` seconds, or terminated early when a queued model
//! needs their GPU. Events at equal times are processed in insertion order.

mod config;
mod metrics;

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::kv::KvEngine;
use crate::model::{GpuSpec, InferenceRequest, ModelSpec, ModelStatsTable, StatsEvent};
use crate::pool::{PoolDump, ReusePool};
use crate::scheduler::{self, GpuSnapshot};
use crate::workload::SizeClass;
use crate::{Bytes, Seconds};

pub use config::{ConfigError, DecodeRates, Mode, PhaseLatencies, SimConfig};
pub use metrics::{
    BatchRecord, InstanceRecord, KvAllocEvent, KvSource, PhaseBreakdown, PoolSample, RequestRecord,
    ReusableSample, RunMetrics, ScheduleLogEntry, Summary,
};

/// Simulates `trace` (sorted by arrival) on the configured cluster.
pub fn run(
    config: &SimConfig,
    catalog: &[ModelSpec],
    trace: &[InferenceRequest],
) -> Result<RunMetrics, ConfigError> {
    run_with_pools(config, catalog, trace).map(|(m, _)| m)
}

/// Like [`run`], also returning each GPU's pool as left at the end of the
/// run, keyed by gpu id.
pub fn run_with_pools(
    config: &SimConfig,
    catalog: &[ModelSpec],
    trace: &[InferenceRequest],
) -> Result<(RunMetrics, BTreeMap<String, PoolDump>), ConfigError> {
    config.validate()?;
    let mut models = BTreeMap::new();
    for m in catalog {
        if models.insert(m.model_id.clone(), m.clone()).is_some() {
            return Err(ConfigError::DuplicateModel(m.model_id.clone()));
        }
    }
    let mut last = f64::NEG_INFINITY;
    for r in trace {
        if !models.contains_key(&r.model_id) {
            return Err(ConfigError::UnknownModel {
                request: r.request_id,
                model: r.model_id.clone(),
            });
        }
        if !(r.arrival_time >= last) {
            return Err(ConfigError::UnorderedTrace(r.request_id));
        }
        last = r.arrival_time;
    }
    let mut sim = Sim::new(config, models, trace);
    sim.run();
    let pools = sim
        .gpus
        .iter()
        .map(|g| (g.spec.gpu_id.clone(), g.pool.dump()))
        .collect();
    Ok((sim.finish(), pools))
}

#[derive(Clone, Debug)]
enum Event {
    Arrival(usize),
    Ready {
        gpu: usize,
        epoch: u64,
    },
    BatchDone {
        gpu: usize,
        epoch: u64,
        requests: Vec<usize>,
    },
    Expire {
        gpu: usize,
        epoch: u64,
        idle_token: u64,
    },
    Sample,
}

struct Scheduled {
    t: Seconds,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct ColdPhases {
    init: Seconds,
    load: Seconds,
    transfer: Seconds,
    merge: Seconds,
    profile: Seconds,
}

struct Instance {
    model_id: String,
    epoch: u64,
    record: usize,
    ready: bool,
    busy: bool,
    queue: VecDeque<usize>,
    /// Requests that waited for this instance to start.
    cold: BTreeSet<usize>,
    phases: ColdPhases,
    /// Load volume not yet attributed to a request.
    unattributed: Option<(Bytes, Bytes)>,
    kv: KvEngine,
    idle_since: Option<Seconds>,
    idle_token: u64,
}

struct Gpu {
    spec: GpuSpec,
    pool: ReusePool,
    instance: Option<Instance>,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    models: BTreeMap<String, ModelSpec>,
    trace: &'a [InferenceRequest],
    gpus: Vec<Gpu>,
    stats: ModelStatsTable,
    pending: VecDeque<usize>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    next_epoch: u64,
    records: BTreeMap<usize, RequestRecord>,
    out: RunMetrics,
}

impl<'a> Sim<'a> {
    fn new(
        cfg: &'a SimConfig,
        models: BTreeMap<String, ModelSpec>,
        trace: &'a [InferenceRequest],
    ) -> Self {
        let mut gpus: Vec<Gpu> = cfg
            .gpus
            .iter()
            .map(|g| Gpu {
                spec: g.clone(),
                pool: ReusePool::for_gpu(g),
                instance: None,
            })
            .collect();
        gpus.sort_by(|a, b| a.spec.gpu_id.cmp(&b.spec.gpu_id));
        let mut sim = Sim {
            cfg,
            models,
            trace,
            gpus,
            stats: ModelStatsTable::default(),
            pending: VecDeque::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            next_epoch: 0,
            records: BTreeMap::new(),
            out: RunMetrics {
                mode: cfg.mode,
                summary: Summary::default(),
                records: Vec::new(),
                unserved: Vec::new(),
                instances: Vec::new(),
                reusable_space: Vec::new(),
                timeseries: Vec::new(),
                schedule_log: Vec::new(),
                kv_log: Vec::new(),
                batches: Vec::new(),
            },
        };
        for (i, r) in trace.iter().enumerate() {
            sim.push(r.arrival_time, Event::Arrival(i));
        }
        if cfg.timeseries_interval.is_some() && !trace.is_empty() {
            sim.push(0.0, Event::Sample);
        }
        sim
    }

    fn push(&mut self, t: Seconds, event: Event) {
        self.heap.push(Scheduled {
            t,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    fn run(&mut self) {
        while let Some(Scheduled { t, event, .. }) = self.heap.pop() {
            match event {
                Event::Arrival(i) => self.on_arrival(i, t),
                Event::Ready { gpu, epoch } => {
                    if let Some(inst) = self.live(gpu, epoch) {
                        inst.ready = true;
                        self.start_batch(gpu, t);
                    }
                }
                Event::BatchDone {
                    gpu,
                    epoch,
                    requests,
                } => {
                    if let Some(inst) = self.live(gpu, epoch) {
                        for r in requests {
                            inst.kv.release_request(r as u64);
                        }
                        inst.busy = false;
                        self.start_batch(gpu, t);
                    }
                }
                Event::Expire {
                    gpu,
                    epoch,
                    idle_token,
                } => {
                    let expired = self.live(gpu, epoch).is_some_and(|inst| {
                        inst.idle_since.is_some() && inst.idle_token == idle_token
                    });
                    if expired {
                        self.terminate(gpu, t);
                        self.schedule_pass(t);
                    }
                }
                Event::Sample => {
                    for g in &self.gpus {
                        let kv = g.pool.kv_bytes();
                        let tensors = g.pool.tensor_bytes();
                        self.out.timeseries.push(PoolSample {
                            t,
                            gpu_id: g.spec.gpu_id.clone(),
                            tensor_bytes: tensors,
                            kv_bytes: kv,
                            free_bytes: g.pool.free_bytes(),
                            utilization: (tensors + kv) as f64 / g.pool.pool_size() as f64,
                        });
                    }
                    if !self.heap.is_empty() {
                        let dt = self.cfg.timeseries_interval.expect("sampling enabled");
                        self.push(t + dt, Event::Sample);
                    }
                }
            }
        }
    }

    fn live(&mut self, gpu: usize, epoch: u64) -> Option<&mut Instance> {
        self.gpus[gpu]
            .instance
            .as_mut()
            .filter(|i| i.epoch == epoch)
    }

    fn on_arrival(&mut self, i: usize, now: Seconds) {
        let req = &self.trace[i];
        self.stats
            .record(StatsEvent::Requested {
                model_id: &req.model_id,
                t: now,
            })
            .expect("arrivals are time-ordered");
        let host = self.gpus.iter().position(|g| {
            g.instance
                .as_ref()
                .is_some_and(|inst| inst.model_id == req.model_id)
        });
        match host {
            Some(g) => {
                let inst = self.gpus[g].instance.as_mut().expect("position found it");
                inst.queue.push_back(i);
                if inst.ready && !inst.busy {
                    self.start_batch(g, now);
                }
            }
            None => {
                self.pending.push_back(i);
                self.schedule_pass(now);
            }
        }
    }

    fn headroom(&self, model: &ModelSpec) -> Bytes {
        scheduler::min_kv_headroom(model, self.cfg.batch_size, self.cfg.block_size_tokens)
    }

    /// Places queued models on free GPUs, terminating idle instances when
    /// that is the only way to make room.
    fn schedule_pass(&mut self, now: Seconds) {
        loop {
            if self.pending.is_empty() {
                return;
            }
            let mut order: Vec<(String, usize)> = Vec::new();
            for &i in &self.pending {
                let m = &self.trace[i].model_id;
                if !order.iter().any(|(o, _)| o == m) {
                    order.push((m.clone(), i));
                }
            }
            let snapshots: Vec<GpuSnapshot> = self
                .gpus
                .iter()
                .map(|g| GpuSnapshot {
                    gpu: g.spec.clone(),
                    available: g.instance.is_none(),
                    free_bytes: g.pool.free_bytes(),
                    reuse_size_by_model: order
                        .iter()
                        .map(|(m, _)| (m.clone(), g.pool.reuse_size(&self.models[m])))
                        .collect(),
                })
                .collect();
            let ids: Vec<&str> = order.iter().map(|(m, _)| m.as_str()).collect();
            let decision =
                scheduler::schedule(&ids, &self.models, &snapshots, |m| self.headroom(m));

            for d in &decision.trace {
                self.out.schedule_log.push(ScheduleLogEntry {
                    t: now,
                    request_id: self.trace[order[d.index].1].request_id,
                    model_id: d.model_id.clone(),
                    candidates: d.candidates.clone(),
                    chosen: d.chosen.clone(),
                    deferred: d.chosen.is_none(),
                });
            }
            let t0 = now + self.cfg.rpc_snapshot_latency * self.gpus.len() as f64;
            for a in &decision.assignments {
                let g = self.gpu_index(&a.gpu_id);
                self.start_instance(g, &a.model_id, t0);
            }
            if decision.deferred.is_empty() {
                return;
            }
            let deferred: Vec<&ModelSpec> = decision
                .deferred
                .iter()
                .map(|&d| &self.models[&order[d].0])
                .collect();
            let victim = self
                .gpus
                .iter()
                .enumerate()
                .filter_map(|(gi, g)| {
                    let inst = g.instance.as_ref()?;
                    let idle = inst.idle_since?;
                    let useful = deferred
                        .iter()
                        .any(|m| g.spec.pool_size >= m.total_size + self.headroom(m));
                    useful.then_some((idle, gi))
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            match victim {
                Some((_, gi)) => self.terminate(gi, now),
                None => return,
            }
        }
    }

    fn gpu_index(&self, id: &str) -> usize {
        self.gpus
            .iter()
            .position(|g| g.spec.gpu_id == id)
            .expect("scheduler returns known gpus")
    }

    fn start_instance(&mut self, g: usize, model_id: &str, t0: Seconds) {
        let model = &self.models[model_id];
        let cfg = self.cfg;
        let gpu = &mut self.gpus[g];
        let bandwidth = gpu.spec.load_bandwidth(model.location);
        self.stats.set_load_bandwidth(model_id, bandwidth);

        let outcome = match gpu.pool.load_model(model, &self.stats, t0, &cfg.policy) {
            Ok(o) => o,
            // Cannot happen when the scheduler's fit check holds; leave the
            // requests queued for the next pass.
            Err(_) => return,
        };
        let mut kv = KvEngine::new(cfg.block_size_tokens, model.bytes_per_token)
            .expect("validated block size");
        let mut reserved = 0;
        if !cfg.mode.on_demand_kv() {
            let per_lane = kv.blocks_for(cfg.max_seq_len as u64);
            let mut probe = gpu.pool.clone();
            probe.evict_all_unpinned();
            let cap = probe.regions().block_capacity(kv.block_bytes());
            reserved = (cfg.batch_size as u64 * per_lane).min(cap);
            if kv.reserve(&mut gpu.pool, &self.stats, reserved).is_err() {
                // Piecewise reclaim can fragment short of the probe's
                // capacity; the probe state itself always fits.
                gpu.pool.evict_all_unpinned();
                if kv.reserve(&mut gpu.pool, &self.stats, reserved).is_err() {
                    reserved = 0;
                }
            }
        }

        let transfer = outcome.bytes_transferred as f64 / bandwidth;
        let merge = outcome.bytes_merged as f64 / gpu.spec.intra_copy_bandwidth;
        let phases = ColdPhases {
            init: cfg.phases.init,
            load: transfer + merge,
            transfer,
            merge,
            profile: cfg.phases.profile,
        };
        let t_ready = t0 + phases.init + phases.load + phases.profile;

        let mut queue = VecDeque::new();
        self.pending.retain(|&i| {
            if self.trace[i].model_id == model_id {
                queue.push_back(i);
                false
            } else {
                true
            }
        });
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        self.out.instances.push(InstanceRecord {
            gpu_id: gpu.spec.gpu_id.clone(),
            model_id: model_id.into(),
            t_start: t0,
            t_ready,
            t_end: f64::NAN,
            t_load: phases.load,
            bytes_transferred: outcome.bytes_transferred,
            bytes_merged: outcome.bytes_merged,
            hit_tensors: outcome.hit_tensors.len(),
            missed_tensors: outcome.missed_tensors.len(),
            evicted_tensors: outcome.plan.evictions.len(),
            eviction_cost: outcome.eviction_cost_total,
            kv_reserved_blocks: reserved,
            batches: 0,
            requests: 0,
        });
        gpu.instance = Some(Instance {
            model_id: model_id.into(),
            epoch,
            record: self.out.instances.len() - 1,
            ready: false,
            busy: false,
            cold: queue.iter().copied().collect(),
            queue,
            phases,
            unattributed: Some((outcome.bytes_transferred, outcome.bytes_merged)),
            kv,
            idle_since: None,
            idle_token: 0,
        });
        self.push(t_ready, Event::Ready { gpu: g, epoch });
    }

    fn start_batch(&mut self, g: usize, now: Seconds) {
        let cfg = self.cfg;
        let gpu = &mut self.gpus[g];
        let inst = gpu.instance.as_mut().expect("caller checked");
        if inst.busy {
            return;
        }
        if inst.queue.is_empty() {
            if inst.idle_since.is_none() {
                inst.idle_since = Some(now);
                inst.idle_token += 1;
                let (epoch, token) = (inst.epoch, inst.idle_token);
                self.push(
                    now + cfg.keep_alive,
                    Event::Expire {
                        gpu: g,
                        epoch,
                        idle_token: token,
                    },
                );
            }
            return;
        }
        inst.idle_since = None;
        inst.busy = true;
        let take = inst.queue.len().min(cfg.batch_size as usize);
        let batch: Vec<usize> = inst.queue.drain(..take).collect();
        let model = &self.models[&inst.model_id];
        let on_demand = cfg.mode.on_demand_kv();
        let mut exhausted: BTreeSet<usize> = BTreeSet::new();
        let mut calls = 0u64;
        let mut log: Vec<KvAllocEvent> = Vec::new();

        // Prompt KV for the whole batch.
        let prompt: Vec<(u64, u64)> = batch
            .iter()
            .map(|&i| (i as u64, self.trace[i].prompt_tokens as u64))
            .collect();
        allocate(
            &mut inst.kv,
            &mut gpu.pool,
            &self.stats,
            &prompt,
            &mut exhausted,
            &mut calls,
            &mut log,
            now,
        );
        let prefill_calls = calls;

        let kv_bytes = gpu.pool.kv_bytes();
        let pool_size = gpu.pool.pool_size();
        let utilization = (gpu.pool.tensor_bytes() + kv_bytes) as f64 / pool_size as f64;
        let reusable = pool_size.saturating_sub(model.total_size + kv_bytes);
        for &i in &batch {
            self.out.reusable_space.push(ReusableSample {
                request_id: self.trace[i].request_id,
                t: now,
                gpu_id: gpu.spec.gpu_id.clone(),
                reusable_bytes: reusable,
                kv_bytes,
                pool_utilization: utilization,
            });
        }

        let overhead = |n: u64| {
            if on_demand {
                n as f64 * cfg.odkv_overhead
            } else {
                0.0
            }
        };
        let prompt_tokens: u64 = batch
            .iter()
            .map(|&i| self.trace[i].prompt_tokens as u64)
            .sum();
        let prefill = cfg.phases.prefill_base
            + cfg.phases.prefill_per_token * prompt_tokens as f64
            + overhead(prefill_calls);
        let prefill_end = now + prefill;

        // Decode: one allocation call per step in which some sequence crosses
        // a block boundary.
        let rate = cfg.decode_rates.rate(SizeClass::of(model));
        let bs = cfg.block_size_tokens as u64;
        let mut crossings: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
        for &i in &batch {
            let (p, o) = (
                self.trace[i].prompt_tokens as u64,
                self.trace[i].output_tokens as u64,
            );
            let mut s = (bs - p % bs) % bs + 1;
            while s <= o {
                crossings.entry(s).or_default().push((i as u64, p + s));
                s += bs;
            }
        }
        for (step, mut wants) in crossings {
            wants.retain(|(r, _)| !exhausted.contains(&(*r as usize)));
            let t = prefill_end + step as f64 / rate;
            allocate(
                &mut inst.kv,
                &mut gpu.pool,
                &self.stats,
                &wants,
                &mut exhausted,
                &mut calls,
                &mut log,
                t,
            );
        }
        let decode_calls = calls - prefill_calls;
        let max_out = batch
            .iter()
            .map(|&i| self.trace[i].output_tokens)
            .max()
            .unwrap_or(0);
        let decode = max_out as f64 / rate + overhead(decode_calls);
        let done = prefill_end + decode;

        let phases = inst.phases;
        for &i in &batch {
            let r = &self.trace[i];
            let cold = inst.cold.remove(&i);
            let p = if cold { phases } else { ColdPhases::default() };
            let (bytes_transferred, bytes_merged) = if cold {
                inst.unattributed.take().unwrap_or((0, 0))
            } else {
                (0, 0)
            };
            let queued_time = (now - r.arrival_time - (p.init + p.load + p.profile)).max(0.0);
            self.records.insert(
                i,
                RequestRecord {
                    request_id: r.request_id,
                    model_id: r.model_id.clone(),
                    gpu_id: gpu.spec.gpu_id.clone(),
                    dataset: r.dataset.clone(),
                    prompt_tokens: r.prompt_tokens,
                    output_tokens: r.output_tokens,
                    cold,
                    t_arrival: r.arrival_time,
                    t_scheduled: now,
                    queued_time,
                    t_init: p.init,
                    t_load: p.load,
                    t_load_transfer: p.transfer,
                    t_load_merge: p.merge,
                    t_profile: p.profile,
                    t_prefill: prefill,
                    ttft: queued_time + p.init + p.load + p.profile + prefill,
                    t_finish: done,
                    bytes_transferred,
                    bytes_merged,
                    kv_exhausted: exhausted.contains(&i),
                },
            );
        }
        let record = &mut self.out.instances[inst.record];
        record.batches += 1;
        record.requests += batch.len() as u64;
        self.out.batches.push(BatchRecord {
            gpu_id: gpu.spec.gpu_id.clone(),
            t_start: now,
            requests: batch.len() as u32,
            kv_alloc_calls: calls,
            odkv_overhead: overhead(calls),
            decode_time: decode,
        });
        if cfg.log_kv_allocations {
            for e in &mut log {
                e.request_id = self.trace[e.request_id as usize].request_id;
            }
            self.out.kv_log.extend(log);
        }
        let epoch = inst.epoch;
        self.push(
            done,
            Event::BatchDone {
                gpu: g,
                epoch,
                requests: batch,
            },
        );
    }

    fn terminate(&mut self, g: usize, now: Seconds) {
        let gpu = &mut self.gpus[g];
        let Some(mut inst) = gpu.instance.take() else {
            return;
        };
        inst.kv
            .teardown(&mut gpu.pool)
            .expect("engine blocks are KV regions");
        gpu.pool.unpin_model(&inst.model_id);
        if !self.cfg.mode.retains_weights() {
            gpu.pool.evict_all_unpinned();
        }
        debug_assert_eq!(gpu.pool.check_invariants(), Ok(()));
        self.out.instances[inst.record].t_end = now;
    }

    fn finish(mut self) -> RunMetrics {
        self.out.unserved = self
            .pending
            .iter()
            .map(|&i| self.trace[i].request_id)
            .collect();
        self.out.records = core::mem::take(&mut self.records).into_values().collect();
        self.out.summary = self.out.summarize();
        self.out
    }
}

/// One KV allocation call for `wants`; on failure, falls back to per-request
/// calls so that only the requests the pool cannot serve are marked.
#[allow(clippy::too_many_arguments)]
fn allocate(
    kv: &mut KvEngine,
    pool: &mut ReusePool,
    stats: &ModelStatsTable,
    wants: &[(u64, u64)],
    exhausted: &mut BTreeSet<usize>,
    calls: &mut u64,
    log: &mut Vec<KvAllocEvent>,
    t: Seconds,
) {
    if wants.is_empty() {
        return;
    }
    let mut record = |step: &crate::kv::KvStep, calls: &mut u64| {
        if step.blocks() > 0 {
            *calls += 1;
        }
        let pool_source = if step.reclaimed.is_empty() {
            KvSource::Pool
        } else {
            KvSource::Reclaim
        };
        for &(r, free, fresh) in &step.per_request {
            if free > 0 {
                log.push(KvAllocEvent {
                    t,
                    request_id: r,
                    blocks: free,
                    source: KvSource::FreeList,
                });
            }
            if fresh > 0 {
                log.push(KvAllocEvent {
                    t,
                    request_id: r,
                    blocks: fresh,
                    source: pool_source,
                });
            }
        }
    };
    match kv.batch_allocate(pool, stats, wants) {
        Ok(step) => record(&step, calls),
        Err(_) => {
            for &(r, tokens) in wants {
                match kv.ensure_capacity(pool, stats, r, tokens) {
                    Ok(step) => record(&step, calls),
                    Err(_) => {
                        exhausted.insert(r as usize);
                    }
                }
            }
        }
    }
}
