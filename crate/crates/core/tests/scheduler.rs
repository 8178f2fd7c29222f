use std::collections::BTreeMap;
use std::time::Instant;

use memreuse_core::scheduler::{schedule, GpuSnapshot, ScheduleDecision};
use memreuse_core::{GpuSpec, ModelLocation, ModelSpec, TensorSpec, GB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    catalog: BTreeMap<String, ModelSpec>,
    snapshots: Vec<GpuSnapshot>,
    requests: Vec<String>,
    headroom: u64,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let catalog: BTreeMap<String, ModelSpec> = (0..rng.random_range(1..=6))
        .map(|m| {
            let id = format!("m{m}");
            let tensors = (0..rng.random_range(1..=4))
                .map(|i| TensorSpec::blob(&id, &format!("w{i}"), rng.random_range(1..=8) * GB))
                .collect();
            let location = if rng.random_bool(0.3) {
                ModelLocation::ModelStore
            } else {
                ModelLocation::ModelCache
            };
            (
                id.clone(),
                ModelSpec::new(&id, tensors, 1 << 20)
                    .unwrap()
                    .with_location(location),
            )
        })
        .collect();
    let snapshots: Vec<GpuSnapshot> = (0..rng.random_range(1..=6))
        .map(|g| {
            let gpu = GpuSpec {
                // Unsorted ids exercise the tie-break.
                gpu_id: format!("gpu{}", (g * 7) % 10),
                pool_size: rng.random_range(4..=48) * GB,
                pcie_bandwidth: [12.0, 24.0, 32.0][rng.random_range(0..3)] * GB as f64,
                intra_copy_bandwidth: 600.0 * GB as f64,
                store_bandwidth: [2.0, 4.0, 16.0, 64.0][rng.random_range(0..4)] * GB as f64,
            };
            let mut reuse_size_by_model = BTreeMap::new();
            for m in catalog.values() {
                if rng.random_bool(0.5) {
                    reuse_size_by_model.insert(
                        m.model_id.clone(),
                        rng.random_range(0..=m.total_size / GB) * GB,
                    );
                }
            }
            GpuSnapshot {
                gpu,
                available: rng.random_bool(0.8),
                free_bytes: 0,
                reuse_size_by_model,
            }
        })
        .collect();
    let ids: Vec<&String> = catalog.keys().collect();
    let requests = (0..rng.random_range(0..=8))
        .map(|_| ids[rng.random_range(0..ids.len())].clone())
        .collect();
    Instance {
        catalog,
        snapshots,
        requests,
        headroom: rng.random_range(0..=2) * GB,
    }
}

/// Per-request argmin with removal, written independently of the scheduler.
fn oracle(inst: &Instance) -> (Vec<(usize, String)>, Vec<usize>) {
    let mut remaining: Vec<&GpuSnapshot> = inst.snapshots.iter().collect();
    let (mut assigned, mut deferred) = (Vec::new(), Vec::new());
    for (i, model_id) in inst.requests.iter().enumerate() {
        let model = &inst.catalog[model_id];
        let mut best: Option<(f64, &str, usize)> = None;
        for (k, s) in remaining.iter().enumerate() {
            if !s.available || s.gpu.pool_size < model.total_size + inst.headroom {
                continue;
            }
            let bw = match model.location {
                ModelLocation::ModelCache => s.gpu.pcie_bandwidth,
                ModelLocation::ModelStore => s.gpu.pcie_bandwidth.min(s.gpu.store_bandwidth),
            };
            let reuse = s.reuse_size_by_model.get(model_id).copied().unwrap_or(0);
            let t = (model.total_size - reuse) as f64 / bw;
            let better = match best {
                None => true,
                Some((bt, bid, _)) => t < bt || (t == bt && s.gpu.gpu_id.as_str() < bid),
            };
            if better {
                best = Some((t, &s.gpu.gpu_id, k));
            }
        }
        match best {
            Some((_, id, k)) => {
                assigned.push((i, id.to_string()));
                remaining.remove(k);
            }
            None => deferred.push(i),
        }
    }
    (assigned, deferred)
}

fn run(inst: &Instance) -> ScheduleDecision {
    let requests: Vec<&str> = inst.requests.iter().map(String::as_str).collect();
    schedule(&requests, &inst.catalog, &inst.snapshots, |_| inst.headroom)
}

fn chosen(d: &ScheduleDecision) -> Vec<(usize, String)> {
    d.assignments
        .iter()
        .map(|a| (a.index, a.gpu_id.clone()))
        .collect()
}

#[test]
fn schedule_matches_argmin_with_removal() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut assigned = 0;
    let mut deferred = 0;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let d = run(&inst);
        let (want, want_deferred) = oracle(&inst);
        assert_eq!(chosen(&d), want);
        assert_eq!(d.deferred, want_deferred);
        // Every request is either assigned or deferred, never dropped.
        assert_eq!(d.assignments.len() + d.deferred.len(), inst.requests.len());
        assigned += d.assignments.len();
        deferred += d.deferred.len();
    }
    assert!(assigned > 0 && deferred > 0);
    eprintln!(
        "{assigned} assigned, {deferred} deferred in {:?}",
        start.elapsed()
    );
}

#[test]
fn choice_is_invariant_under_bandwidth_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let base = chosen(&run(&inst));
        let mut scaled = Instance {
            snapshots: inst.snapshots.clone(),
            ..inst
        };
        for s in &mut scaled.snapshots {
            s.gpu.pcie_bandwidth *= 10.0;
            s.gpu.store_bandwidth *= 10.0;
            s.gpu.intra_copy_bandwidth *= 10.0;
        }
        assert_eq!(chosen(&run(&scaled)), base);
    }
}

#[test]
fn schedule_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        assert_eq!(run(&inst), run(&inst));
    }
}
