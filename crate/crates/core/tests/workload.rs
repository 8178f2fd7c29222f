use std::collections::BTreeMap;

use memreuse_core::workload::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn models() -> Vec<String> {
    default_catalog().into_iter().map(|m| m.model_id).collect()
}

fn counts(seq: &[usize]) -> BTreeMap<usize, usize> {
    let mut c = BTreeMap::new();
    for &m in seq {
        *c.entry(m).or_default() += 1;
    }
    c
}

fn mean_and_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean)
}

#[test]
fn traces_are_deterministic_per_seed() {
    for locality in Locality::ALL {
        let spec = TraceSpec::new(7, 300, locality, 2.0, models());
        assert_eq!(
            generate_trace(&spec).unwrap(),
            generate_trace(&spec).unwrap()
        );
        let other = TraceSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_trace(&spec).unwrap(),
            generate_trace(&other).unwrap()
        );
    }
}

#[test]
fn unit_cv_gives_exponential_gaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let times = arrival_times(100_000, 3.0, 1.0, &mut rng);
    let gaps: Vec<f64> = std::iter::once(times[0])
        .chain(times.windows(2).map(|w| w[1] - w[0]))
        .collect();
    let (mean, cv) = mean_and_cv(&gaps);
    assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    assert!((cv - 1.0).abs() < 0.05, "cv {cv}");
}

#[test]
fn gap_cv_follows_the_requested_value() {
    for cv in [0.25, 0.5, 2.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times = arrival_times(100_000, 1.0, cv, &mut rng);
        let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let (mean, got) = mean_and_cv(&gaps);
        assert!((mean - 1.0).abs() < 0.05, "mean {mean} at cv {cv}");
        assert!((got - cv).abs() / cv < 0.05, "cv {got} vs {cv}");
    }
}

#[test]
fn l2_halves_a_run_of_six() {
    let base = [0, 1, 1, 1, 1, 1, 1, 2, 0];
    let edited = apply_locality(&base, Locality::L2).unwrap();
    let longest = runs(&edited)
        .iter()
        .filter(|r| r.0 == 1)
        .map(|r| r.1)
        .max()
        .unwrap();
    assert_eq!(longest, 3);
    assert_eq!(counts(&edited), counts(&base));
}

#[test]
fn sample_means_match_the_profiles() {
    let profile = LengthProfile::log_normal("wide", 200.0, 80.0, 0.5, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<(u32, u32)> = (0..10_000)
        .map(|_| sample_lengths(&profile, &mut rng))
        .collect();
    let prompt = samples.iter().map(|s| s.0 as f64).sum::<f64>() / 1e4;
    let output = samples.iter().map(|s| s.1 as f64).sum::<f64>() / 1e4;
    assert!((prompt - 200.0).abs() / 200.0 < 0.05, "{prompt}");
    assert!((output - 80.0).abs() / 80.0 < 0.05, "{output}");
}

#[test]
fn fixed_and_disjoint_profiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fixed = LengthProfile {
        dataset: "fixed".into(),
        prompt: LengthDist::Fixed { tokens: 128 },
        output: LengthDist::Fixed { tokens: 128 },
    };
    let low = LengthDist::LogNormal {
        mean: 20.0,
        cv: 1.0,
        min: 1,
        max: 50,
    };
    let high = LengthDist::LogNormal {
        mean: 200.0,
        cv: 1.0,
        min: 51,
        max: 1000,
    };
    for _ in 0..1000 {
        assert_eq!(sample_lengths(&fixed, &mut rng), (128, 128));
        assert!(low.sample(&mut rng) <= 50);
        assert!(high.sample(&mut rng) >= 51);
    }
}

#[test]
fn default_profiles_span_a_wide_footprint_range() {
    let footprints: Vec<f64> = default_profiles()
        .iter()
        .map(|p| p.prompt.mean() + p.output.mean())
        .collect();
    let ratio = footprints.iter().cloned().fold(f64::MIN, f64::max)
        / footprints.iter().cloned().fold(f64::MAX, f64::min);
    assert!((20.0..=140.0).contains(&ratio), "{ratio}");
}

#[test]
fn higher_locality_means_longer_runs() {
    let mut means = Vec::new();
    for locality in Locality::ALL {
        let spec = TraceSpec::new(11, 2000, locality, 1.0, models());
        let trace = generate_trace(&spec).unwrap();
        let ids: Vec<usize> = trace
            .iter()
            .map(|r| spec.models.iter().position(|m| *m == r.model_id).unwrap())
            .collect();
        let rs = runs(&ids);
        means.push(ids.len() as f64 / rs.len() as f64);
    }
    assert_eq!(means[0], 1.0);
    for w in means.windows(2) {
        assert!(w[0] < w[1], "{means:?}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let good = TraceSpec::new(1, 10, Locality::L3, 1.0, models());
    assert!(matches!(
        generate_trace(&TraceSpec {
            models: vec![],
            ..good.clone()
        }),
        Err(TraceError::EmptyCatalog)
    ));
    assert!(matches!(
        generate_trace(&TraceSpec {
            cv: 0.0,
            ..good.clone()
        }),
        Err(TraceError::BadCv(_))
    ));
    assert!(matches!(
        generate_trace(&TraceSpec {
            mean_interarrival: -1.0,
            ..good.clone()
        }),
        Err(TraceError::BadMean(_))
    ));
    assert!(matches!(
        generate_trace(&TraceSpec {
            repeat_prob: 1.0,
            ..good.clone()
        }),
        Err(TraceError::BadRepeatProb(_))
    ));
    assert!(matches!(
        generate_trace(&TraceSpec {
            profiles: vec![],
            ..good
        }),
        Err(TraceError::NoProfiles)
    ));
    // A single model cannot be spread out.
    let single = TraceSpec::new(1, 10, Locality::L1, 1.0, vec!["only".into()]);
    assert!(matches!(
        generate_trace(&single),
        Err(TraceError::LocalityInfeasible { .. })
    ));
}

proptest! {
    #[test]
    fn arrivals_strictly_increase(seed in any::<u64>(), cv in 0.1f64..4.0, n in 1usize..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = arrival_times(n, 0.5, cv, &mut rng);
        prop_assert!(t[0] > 0.0);
        prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn locality_edits_only_reorder(seq in prop::collection::vec(0usize..5, 0..200)) {
        for locality in Locality::ALL {
            if let Ok(edited) = apply_locality(&seq, locality) {
                prop_assert_eq!(counts(&edited), counts(&seq));
                let rs = runs(&edited);
                match locality {
                    Locality::L1 => prop_assert!(rs.iter().all(|r| r.1 == 1)),
                    Locality::L2 => {
                        let longest = runs(&seq).iter().map(|r| r.1).max().unwrap_or(0);
                        prop_assert!(rs.iter().all(|r| r.1 <= longest.div_ceil(2).max(1) * 2));
                        prop_assert!(rs.len() >= runs(&seq).len());
                    }
                    Locality::L3 => prop_assert_eq!(&edited, &seq),
                    Locality::L4 => prop_assert!(rs.len() <= runs(&seq).len()),
                }
            }
        }
    }

    #[test]
    fn l1_succeeds_when_no_model_dominates(seq in prop::collection::vec(0usize..5, 1..200)) {
        let c = counts(&seq);
        let max = *c.values().max().unwrap();
        if 2 * max <= seq.len() + 1 {
            prop_assert!(apply_locality(&seq, Locality::L1).is_ok());
        }
    }

    #[test]
    fn generated_traces_are_well_formed(seed in any::<u64>(), locality in 0usize..4) {
        let spec = TraceSpec::new(seed, 200, Locality::ALL[locality], 1.5, models());
        match generate_trace(&spec) {
            Ok(trace) => {
                prop_assert_eq!(trace.len(), 200);
                prop_assert!(trace.windows(2).all(|w| w[0].arrival_time < w[1].arrival_time));
                prop_assert!(trace.iter().all(|r| r.prompt_tokens > 0 && r.output_tokens > 0));
                prop_assert!(trace.iter().enumerate().all(|(i, r)| r.request_id == i as u64));
            }
            Err(TraceError::LocalityInfeasible { .. }) => {}
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
