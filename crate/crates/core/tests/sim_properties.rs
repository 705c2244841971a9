mod common;

use common::{random_trace, reference_replay};
use medgate::domain::EventKind;
use medgate::prefetch::PrefetchConfig;
use medgate::sim::{run_experiment, run_simulation, simulate, SimConfig};
use medgate::trace::{generate_workload, WorkloadConfig};

fn small_workload(seed: u64) -> WorkloadConfig {
    WorkloadConfig {
        duration_days: 12,
        n_studies: 400,
        total_repo_bytes: 4_000_000_000,
        seed,
        ..Default::default()
    }
}

#[test]
fn lru_path_matches_reference_on_random_traces() {
    for seed in 0..30 {
        let (index, trace) = random_trace(seed, 40, 300);
        let capacity = index.total_bytes() / (2 + seed % 5);
        let cfg = SimConfig {
            cache_capacity_bytes: capacity,
            prefetch_enabled: false,
            ..Default::default()
        };
        let got = run_simulation(&trace, &index, &cfg).unwrap().hit_sequence;
        assert_eq!(
            got,
            reference_replay(&trace, &index, capacity, &cfg.network),
            "seed {seed}"
        );
    }
}

#[test]
fn lru_hit_ratio_follows_reference_at_each_size() {
    let w = generate_workload(&WorkloadConfig::default()).unwrap();
    let fractions = [0.00125, 0.005, 0.01, 0.025, 0.05];
    let base = SimConfig {
        prefetch_enabled: false,
        ..Default::default()
    };
    let rep = run_experiment(&w.events, &w.index, &fractions, 1, &base).unwrap();
    let mut previous = -1.0;
    for (row, f) in rep.rows.iter().zip(fractions) {
        let capacity = (f * w.index.total_bytes() as f64).round() as u64;
        let oracle = reference_replay(&w.events, &w.index, capacity, &base.network);
        let oracle_ratio = oracle.iter().filter(|h| **h).count() as f64 / oracle.len() as f64;
        assert_eq!(row.hit_ratio, oracle_ratio, "fraction {f}");
        assert!(row.hit_ratio >= previous, "hit ratio fell at fraction {f}");
        previous = row.hit_ratio;
    }
}

#[test]
fn disabled_prefetch_ignores_prefetch_settings() {
    let w = generate_workload(&small_workload(3)).unwrap();
    let a = SimConfig {
        cache_capacity_bytes: 200_000_000,
        prefetch_enabled: false,
        ..Default::default()
    };
    let b = SimConfig {
        seed: 77,
        prefetch: PrefetchConfig {
            score_floor: 0.0,
            fill_fraction: 1.0,
            top_k: 5,
            ..Default::default()
        },
        ..a.clone()
    };
    let ra = run_simulation(&w.events, &w.index, &a).unwrap();
    let rb = run_simulation(&w.events, &w.index, &b).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.hit_sequence, rb.hit_sequence);
    assert_eq!(ra.bytes_prefetched, 0);
}

#[test]
fn every_retrieve_is_counted_once_and_runs_repeat() {
    for seed in 1..=4 {
        let w = generate_workload(&small_workload(seed)).unwrap();
        let retrieves = w
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Retrieve)
            .count() as u64;
        for fraction in [0.001, 0.02, 0.2] {
            let cfg = SimConfig {
                cache_capacity_bytes: (fraction * w.index.total_bytes() as f64) as u64,
                seed,
                ..Default::default()
            };
            let out = simulate(&w.events, &w.index, &cfg).unwrap();
            let r = &out.report;
            assert_eq!(r.total_requests, retrieves);
            assert_eq!(r.hits + r.misses, r.total_requests);
            assert_eq!(r.hit_sequence.len() as u64, retrieves);
            assert_eq!(r.per_day.iter().map(|d| d.requests).sum::<u64>(), retrieves);
            assert_eq!(r.per_day.iter().map(|d| d.hits).sum::<u64>(), r.hits);
            assert!((0.0..=1.0).contains(&r.hit_ratio));
            assert!((0.0..=1.0).contains(&r.prefetch_precision));
            assert!(out.cache.used_bytes() <= out.cache.capacity_bytes());
            assert!(out.cache.is_consistent());
            assert!(r.retrieval_time_per_image_s > 0.0);
            assert_eq!(&run_simulation(&w.events, &w.index, &cfg).unwrap(), r);
        }
    }
}

#[test]
fn prefetching_helps_on_the_standard_mix() {
    let w = generate_workload(&small_workload(9)).unwrap();
    let capacity = (0.01 * w.index.total_bytes() as f64) as u64;
    let lru = SimConfig {
        cache_capacity_bytes: capacity,
        prefetch_enabled: false,
        ..Default::default()
    };
    let with = SimConfig {
        prefetch_enabled: true,
        ..lru.clone()
    };
    let a = run_simulation(&w.events, &w.index, &lru).unwrap();
    let b = run_simulation(&w.events, &w.index, &with).unwrap();
    assert!(
        b.hit_ratio > a.hit_ratio,
        "{} vs {}",
        b.hit_ratio,
        a.hit_ratio
    );
    assert!(b.bytes_prefetched > 0);
}
