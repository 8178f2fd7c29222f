use std::time::Instant;

use memreuse_core::kv::{KvEngine, ALLOWED_BLOCK_SIZES};
use memreuse_core::{ModelStatsTable, RegionState, ReusePool, StatsEvent, TensorSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BYTES_PER_TOKEN: u64 = 4;

/// Pool partly filled with unpinned tensors of two models so that block
/// allocation sometimes has to reclaim.
fn fragmented_pool(rng: &mut ChaCha8Rng, stats: &mut ModelStatsTable) -> ReusePool {
    let mut pool = ReusePool::new(8192);
    let mut offset = 0;
    let mut i = 0;
    while offset < 6000 {
        offset += rng.random_range(0..200);
        let size = rng.random_range(16..400);
        let model = if rng.random_bool(0.5) { "cold" } else { "warm" };
        let t = TensorSpec::blob(model, &format!("t{i}"), size);
        if offset + size <= 8192 {
            pool.insert_tensor(&t, offset, 1.0, 0.0).unwrap();
        }
        offset += size;
        i += 1;
    }
    stats
        .record(StatsEvent::Requested {
            model_id: "cold",
            t: 0.0,
        })
        .unwrap();
    for t in 1..4 {
        stats
            .record(StatsEvent::Requested {
                model_id: "warm",
                t: t as f64,
            })
            .unwrap();
    }
    pool
}

#[test]
fn batch_and_sequential_allocation_reach_the_same_state() {
    let start = Instant::now();
    let mut reclaiming = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = ModelStatsTable::default();
        let block = ALLOWED_BLOCK_SIZES[seed as usize % 3];
        let mut pool_a = fragmented_pool(&mut rng, &mut stats);
        let mut pool_b = pool_a.clone();
        let mut eng_a = KvEngine::new(block, BYTES_PER_TOKEN).unwrap();
        let mut eng_b = eng_a.clone();
        let mut tokens = [0u64; 8];
        for _round in 0..30 {
            for (r, t) in tokens.iter_mut().enumerate() {
                if *t > 0 && rng.random_bool(0.1) {
                    eng_a.release_request(r as u64);
                    eng_b.release_request(r as u64);
                    *t = 0;
                }
            }
            let batch: Vec<(u64, u64)> = (0..rng.random_range(1..=8))
                .map(|_| {
                    let r = rng.random_range(0..8usize);
                    tokens[r] += rng.random_range(1..=24);
                    (r as u64, tokens[r])
                })
                .collect();
            let snapshot = (pool_a.clone(), eng_a.clone(), pool_b.clone(), eng_b.clone());
            let batched = eng_a.batch_allocate(&mut pool_a, &stats, &batch);
            let sequential: Result<Vec<_>, _> = batch
                .iter()
                .map(|&(r, t)| eng_b.ensure_capacity(&mut pool_b, &stats, r, t))
                .collect();
            match (batched, sequential) {
                (Ok(step), Ok(steps)) => {
                    assert!(step.pool_calls <= 1);
                    assert_eq!(step.blocks(), steps.iter().map(|s| s.blocks()).sum::<u64>());
                    if !step.reclaimed.is_empty() {
                        reclaiming += 1;
                    }
                }
                (Err(_), _) => {
                    // Atomic: nothing changed on the batched side.
                    assert_eq!((&pool_a, &eng_a), (&snapshot.0, &snapshot.1));
                    break;
                }
                (Ok(_), Err(e)) => panic!("sequential failed where batch succeeded: {e}"),
            }
            assert_eq!(pool_a.dump(), pool_b.dump(), "seed {seed}");
            for r in 0..8 {
                assert_eq!(eng_a.table(r), eng_b.table(r));
            }
            assert_eq!(eng_a.free_list_len(), eng_b.free_list_len());
            pool_a.check_invariants().unwrap();
            eng_a.check_invariants().unwrap();
        }
    }
    assert!(reclaiming > 0, "workloads never exercised reclaim");
    eprintln!(
        "100 workloads in {:?}, {reclaiming} batches reclaimed tensors",
        start.elapsed()
    );
}

#[test]
fn batching_uses_one_pool_call() {
    let stats = ModelStatsTable::default();
    let mut pool = ReusePool::new(1 << 20);
    let mut eng = KvEngine::new(16, BYTES_PER_TOKEN).unwrap();
    let batch: Vec<(u64, u64)> = (0..16).map(|r| (r, 16)).collect();
    let step = eng.batch_allocate(&mut pool, &stats, &batch).unwrap();
    assert_eq!((step.pool_calls, step.from_pool), (1, 16));
    let step = eng.batch_allocate(&mut pool, &stats, &batch).unwrap();
    assert_eq!((step.pool_calls, step.blocks()), (0, 0));
}

#[test]
fn release_then_allocate_reuses_blocks_without_pool_calls() {
    let stats = ModelStatsTable::default();
    let mut pool = ReusePool::new(1 << 20);
    let mut eng = KvEngine::new(16, BYTES_PER_TOKEN).unwrap();
    eng.ensure_capacity(&mut pool, &stats, 1, 48).unwrap();
    assert_eq!(eng.release_request(1), 3);
    assert_eq!(eng.free_list_len(), 3);
    let step = eng.ensure_capacity(&mut pool, &stats, 2, 32).unwrap();
    assert_eq!((step.from_free_list, step.pool_calls), (2, 0));
}

#[test]
fn only_pinned_tensors_means_pool_exhausted() {
    let stats = ModelStatsTable::default();
    let mut pool = ReusePool::new(256);
    let t = TensorSpec::blob("active", "w", 256);
    pool.insert_tensor(&t, 0, 1.0, 0.0).unwrap();
    pool.pin_model("active");
    let mut eng = KvEngine::new(16, BYTES_PER_TOKEN).unwrap();
    assert!(eng.ensure_capacity(&mut pool, &stats, 0, 1).is_err());
    pool.unpin_model("active");
    let step = eng.ensure_capacity(&mut pool, &stats, 0, 1).unwrap();
    assert_eq!(step.reclaimed, vec![t.id]);
}

/// Pool calls during decode when each request grows one token at a time from
/// its prompt to its final length, one request per call.
fn decode_calls(block: u32, workload: &[(u64, u64)]) -> u64 {
    let stats = ModelStatsTable::default();
    let mut pool = ReusePool::new(1 << 24);
    let mut eng = KvEngine::new(block, BYTES_PER_TOKEN).unwrap();
    let mut calls = 0;
    for (r, &(prompt, output)) in workload.iter().enumerate() {
        eng.ensure_capacity(&mut pool, &stats, r as u64, prompt)
            .unwrap();
        for t in prompt + 1..=prompt + output {
            calls += eng
                .ensure_capacity(&mut pool, &stats, r as u64, t)
                .unwrap()
                .pool_calls;
        }
    }
    calls
}

#[test]
fn doubling_the_block_size_halves_allocation_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let workload: Vec<(u64, u64)> = (0..64)
        .map(|_| (rng.random_range(1..512), rng.random_range(1..512)))
        .collect();
    let calls: Vec<u64> = ALLOWED_BLOCK_SIZES
        .iter()
        .map(|&b| decode_calls(b, &workload))
        .collect();
    for w in calls.windows(2) {
        // Crossings at block 2k are every other crossing at block k, so each
        // request rounds up by at most one.
        assert!(2 * w[1] <= w[0] + workload.len() as u64, "{calls:?}");
        assert!(w[1] < w[0]);
    }
    // Aggregated over many tokens the rounding vanishes.
    let long = [(1u64, 4096u64)];
    let calls: Vec<u64> = ALLOWED_BLOCK_SIZES
        .iter()
        .map(|&b| decode_calls(b, &long))
        .collect();
    assert_eq!(calls, vec![512, 256, 128]);
}

proptest! {
    #[test]
    fn allocation_is_demand_bounded(ops in prop::collection::vec((0u64..6, 0u64..64, any::<bool>()), 1..60), block in 0usize..3) {
        let stats = ModelStatsTable::default();
        let mut pool = ReusePool::new(1 << 20);
        let mut eng = KvEngine::new(ALLOWED_BLOCK_SIZES[block], BYTES_PER_TOKEN).unwrap();
        let mut tokens = [0u64; 6];
        let max_seq = 64 * 60;
        for (r, grow, release) in ops {
            if release {
                eng.release_request(r);
                tokens[r as usize] = 0;
            } else {
                tokens[r as usize] += grow;
                eng.ensure_capacity(&mut pool, &stats, r, tokens[r as usize]).unwrap();
            }
            let held: u64 = (0..6).filter_map(|r| eng.table(r)).map(|t| t.blocks.len() as u64).sum();
            let demand: u64 = tokens.iter().map(|&t| eng.blocks_for(t)).sum();
            prop_assert_eq!(held, demand);
            prop_assert_eq!(eng.kv_bytes(), (held + eng.free_list_len() as u64) * eng.block_bytes());
            prop_assert!(eng.kv_bytes() <= 6 * max_seq * BYTES_PER_TOKEN + eng.block_bytes() * 6);
            prop_assert_eq!(pool.kv_bytes(), eng.kv_bytes());
            eng.check_invariants().unwrap();
            pool.check_invariants().unwrap();
        }
        let kv = pool.kv_bytes();
        let free = pool.free_bytes();
        eng.teardown(&mut pool).unwrap();
        prop_assert_eq!(pool.free_bytes(), free + kv);
        prop_assert!(pool.regions().iter().all(|r| !matches!(r.state, RegionState::KvBlock(_))));
    }
}
