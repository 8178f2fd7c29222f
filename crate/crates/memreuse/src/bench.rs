//! Heuristic planner against the exhaustive oracle on random instances.

use memreuse_core::packing::{
    brute_force_oracle, plan_allocation, random_instance, BenchParams, LoadPolicy, OracleError,
    ORACLE_MAX_NEW, ORACLE_MAX_RESIDENT,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub instance_id: usize,
    pub heuristic_cost: f64,
    pub oracle_cost: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn mean_gap(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.gap).sum::<f64>() / self.rows.len() as f64
    }

    pub fn max_gap(&self) -> f64 {
        self.rows.iter().map(|r| r.gap).fold(0.0, f64::max)
    }

    pub fn optimal(&self) -> usize {
        self.rows.iter().filter(|r| r.gap == 0.0).count()
    }

    pub fn csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("flat rows serialize");
        }
        if self.rows.is_empty() {
            w.write_record(["instance_id", "heuristic_cost", "oracle_cost", "gap"])
                .unwrap();
        }
        w.into_inner().expect("in-memory writer")
    }

    pub fn summary(&self) -> String {
        format!(
            "{} instances, optimal on {}, mean gap {:.6} s, max gap {:.6} s",
            self.rows.len(),
            self.optimal(),
            self.mean_gap(),
            self.max_gap()
        )
    }
}

/// `count` instances from one seeded stream. Costs are objective values
/// in seconds.
pub fn bench_packing(
    count: usize,
    seed: u64,
    params: &BenchParams,
    policy: &LoadPolicy,
) -> Result<BenchReport, Error> {
    if params.max_resident > ORACLE_MAX_RESIDENT || params.max_new > ORACLE_MAX_NEW {
        return Err(OracleError::InstanceTooLarge {
            resident: params.max_resident,
            new: params.max_new,
        }
        .into());
    }
    if params.max_tensor == 0 || !(params.intra_copy_bandwidth > 0.0) {
        return Err(Error::Usage(
            "tensor size bound and copy bandwidth must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count);
    for instance_id in 0..count {
        let inst = random_instance(&mut rng, params);
        let oracle = brute_force_oracle(
            &inst.regions,
            &inst.new_tensors,
            &inst.candidates,
            inst.intra_copy_bandwidth,
        )?;
        let plan = plan_allocation(&inst.regions, &inst.new_tensors, &inst.candidates, policy)
            .map_err(|e| {
                Error::Infeasible(format!(
                    "instance {instance_id}: heuristic failed where the oracle succeeded: {e}"
                ))
            })?;
        let heuristic_cost = plan.objective(&inst.candidates, inst.intra_copy_bandwidth);
        rows.push(BenchRow {
            instance_id,
            heuristic_cost,
            oracle_cost: oracle.objective,
            gap: heuristic_cost - oracle.objective,
        });
    }
    Ok(BenchReport { rows })
}
