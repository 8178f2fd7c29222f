use std::collections::BTreeMap;

use memreuse_core::sim::{run, Mode, RunMetrics, SimConfig};
use memreuse_core::workload::{generate_trace, Locality, TraceSpec};
use memreuse_core::{GpuSpec, ModelLocation, ModelSpec, TensorSpec, GB};
use proptest::prelude::*;

fn gpu(id: &str, pool: u64) -> GpuSpec {
    GpuSpec {
        gpu_id: id.into(),
        pool_size: pool,
        pcie_bandwidth: 16.0 * GB as f64,
        intra_copy_bandwidth: 400.0 * GB as f64,
        store_bandwidth: 4.0 * GB as f64,
    }
}

/// Small models with uneven tensors; every third one lives in the store.
fn catalog(sizes: &[u64]) -> Vec<ModelSpec> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &gb)| {
            let id = format!("m{i}");
            let tensors = (0..4 + i as u64)
                .map(|t| {
                    TensorSpec::blob(
                        &id,
                        &format!("t{t}"),
                        gb * GB / (4 + i as u64) + t * 1_000_003,
                    )
                })
                .collect();
            let loc = if i % 3 == 2 {
                ModelLocation::ModelStore
            } else {
                ModelLocation::ModelCache
            };
            ModelSpec::new(&id, tensors, 200_000)
                .unwrap()
                .with_location(loc)
        })
        .collect()
}

fn setup(
    seed: u64,
    locality: Locality,
    gpus: usize,
    batch: u32,
) -> (
    SimConfig,
    Vec<ModelSpec>,
    Vec<memreuse_core::InferenceRequest>,
) {
    let models = catalog(&[2, 3, 5, 4, 6, 1]);
    let ids = models.iter().map(|m| m.model_id.clone()).collect();
    let spec = TraceSpec::new(seed, 60, locality, 3.0, ids);
    let trace = generate_trace(&spec)
        .or_else(|_| {
            generate_trace(&TraceSpec {
                locality: Locality::L3,
                ..spec
            })
        })
        .unwrap();
    let cfg = SimConfig {
        gpus: (0..gpus).map(|g| gpu(&format!("g{g}"), 12 * GB)).collect(),
        batch_size: batch,
        keep_alive: 20.0,
        seed,
        ..SimConfig::default()
    };
    (cfg, models, trace)
}

fn run_mode(
    cfg: &SimConfig,
    mode: Mode,
    models: &[ModelSpec],
    trace: &[memreuse_core::InferenceRequest],
) -> RunMetrics {
    run(
        &SimConfig {
            mode,
            ..cfg.clone()
        },
        models,
        trace,
    )
    .unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reuse_never_transfers_more_than_baseline(seed in any::<u64>(), loc in 0usize..4, gpus in 1usize..3, batch in 1u32..9) {
        let (cfg, models, trace) = setup(seed, Locality::ALL[loc], gpus, batch);
        let base = run_mode(&cfg, Mode::Baseline, &models, &trace);
        let reuse = run_mode(&cfg, Mode::Reuse, &models, &trace);
        prop_assert!(reuse.summary.total_bytes_transferred <= base.summary.total_bytes_transferred);
    }

    #[test]
    fn records_are_internally_consistent(seed in any::<u64>(), loc in 0usize..4, mode in 0usize..3) {
        let (cfg, models, trace) = setup(seed, Locality::ALL[loc], 2, 4);
        let m = run_mode(&cfg, Mode::ALL[mode], &models, &trace);
        prop_assert_eq!(m.records.len() + m.unserved.len(), trace.len());
        let by_id: BTreeMap<&str, &ModelSpec> = models.iter().map(|s| (s.model_id.as_str(), s)).collect();
        let bw: BTreeMap<&str, &GpuSpec> = cfg.gpus.iter().map(|g| (g.gpu_id.as_str(), g)).collect();
        for r in &m.records {
            let sum = r.queued_time + r.t_init + r.t_load + r.t_profile + r.t_prefill;
            prop_assert!(close(r.ttft, sum), "ttft {} vs phases {}", r.ttft, sum);
            prop_assert!(close(r.t_load, r.t_load_transfer + r.t_load_merge));
            if !r.cold {
                prop_assert_eq!((r.t_init, r.t_load, r.t_profile), (0.0, 0.0, 0.0));
            }
        }
        // Load time recomputed from the instance's volumes.
        for i in &m.instances {
            let g = bw[i.gpu_id.as_str()];
            let model = by_id[i.model_id.as_str()];
            let expect = i.bytes_transferred as f64 / g.load_bandwidth(model.location)
                + i.bytes_merged as f64 / g.intra_copy_bandwidth;
            prop_assert!(close(i.t_load, expect), "{} vs {}", i.t_load, expect);
            prop_assert!(i.bytes_transferred <= model.total_size);
            if Mode::ALL[mode] == Mode::Baseline {
                prop_assert_eq!(i.bytes_transferred, model.total_size);
            }
        }
        prop_assert_eq!(m.summarize(), m.summary.clone());
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), mode in 0usize..3) {
        let (cfg, models, trace) = setup(seed, Locality::L3, 2, 4);
        prop_assert_eq!(run_mode(&cfg, Mode::ALL[mode], &models, &trace), run_mode(&cfg, Mode::ALL[mode], &models, &trace));
    }
}

#[test]
fn on_demand_kv_never_shrinks_reusable_space() {
    let mut strictly = 0;
    let mut samples = 0;
    for seed in 0..24 {
        for batch in [1, 4, 8] {
            let (cfg, models, trace) = setup(seed, Locality::L3, 1, batch);
            let pre = run_mode(&cfg, Mode::Reuse, &models, &trace);
            let odkv = run_mode(&cfg, Mode::ReuseOdkv, &models, &trace);
            let pre: BTreeMap<u64, u64> = pre
                .reusable_space
                .iter()
                .map(|s| (s.request_id, s.reusable_bytes))
                .collect();
            for s in &odkv.reusable_space {
                if let Some(&p) = pre.get(&s.request_id) {
                    assert!(
                        s.reusable_bytes >= p,
                        "seed {seed} batch {batch} request {}",
                        s.request_id
                    );
                    strictly += (s.reusable_bytes > p) as usize;
                    samples += 1;
                }
            }
        }
    }
    assert!(strictly > 0 && samples > 0);
}
