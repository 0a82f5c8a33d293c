//! Data generation, partitioning, herding and buffer behaviour against
//! independent oracles.

use std::collections::BTreeMap;

use fcl_core::data::{
    dirichlet_partition, gen_terrain, herding_select, make_task_sequence, mask_for_task, Candidates, MemoryBuffer, TerrainSample,
};
use fcl_tensor::IGNORE_LABEL;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force greedy herding: recomputes every candidate mean from scratch.
fn greedy_oracle(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let dim = features[0].len();
    let mu: Vec<f64> = (0..dim).map(|d| features.iter().map(|f| f[d]).sum::<f64>() / n as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m.min(n) {
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let members: Vec<usize> = chosen.iter().copied().chain([i]).collect();
            let dist: f64 = (0..dim)
                .map(|d| {
                    let mean = members.iter().map(|&j| features[j][d]).sum::<f64>() / members.len() as f64;
                    (mu[d] - mean).powi(2)
                })
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn herding_matches_greedy_oracle_and_is_prefix_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let dim = rng.random_range(1..=5);
        let f = random_features(&mut rng, n, dim);
        let m = rng.random_range(1..=n);
        let picked = herding_select(&f, m);
        assert_eq!(picked, greedy_oracle(&f, m));
        let longer = herding_select(&f, m + 1);
        assert_eq!(&longer[..m], &picked[..]);
    }
}

#[test]
fn herding_examples() {
    let f = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
    assert_eq!(herding_select(&f, 1), vec![2]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_features(&mut rng, 10, 4);
    let mut all = herding_select(&f, 10);
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(herding_select(&f, 4), greedy_oracle(&f, 4));
}

#[test]
fn task_sequences_for_standard_settings() {
    let classes =
        |total, base, inc| -> Vec<Vec<u8>> { make_task_sequence(total, base, inc, 10).unwrap().into_iter().map(|t| t.classes).collect() };
    assert_eq!(classes(9, 5, 1), vec![vec![0, 1, 2, 3, 4], vec![5], vec![6], vec![7], vec![8]]);
    assert_eq!(classes(9, 3, 2), vec![vec![0, 1, 2], vec![3, 4], vec![5, 6], vec![7, 8]]);
    assert_eq!(classes(4, 2, 1), vec![vec![0, 1], vec![2], vec![3]]);
    assert!(make_task_sequence(9, 10, 1, 10).is_err());
}

#[test]
fn masking_counts_old_pixels_exactly() {
    for seed in 0..20 {
        let s = gen_terrain(seed, &[0, 1, 2, 5], 8, 8, 6, 0.08).unwrap();
        let old = s.labels.iter().filter(|&&l| l != 5).count();
        let masked = mask_for_task(&s, &[5]);
        assert_eq!(masked.labels.iter().filter(|&&l| l == IGNORE_LABEL).count(), old);
        assert_eq!(masked.image, s.image);
        assert_eq!(mask_for_task(&s, &[0, 1, 2, 5]), s);
        let none = mask_for_task(&s, &[7]);
        assert!(none.labels.iter().all(|&l| l == IGNORE_LABEL));
    }
}

fn single_class_scenes(n: usize, classes: u8, seed: u64) -> Vec<TerrainSample> {
    (0..n).map(|i| gen_terrain(seed * 1000 + i as u64, &[(i % classes as usize) as u8], 4, 4, 1, 0.08).unwrap()).collect()
}

fn spread(sizes: &[usize]) -> f64 {
    let max = *sizes.iter().max().unwrap() as f64;
    let min = *sizes.iter().min().unwrap() as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[test]
fn small_beta_is_more_uneven_than_large_beta() {
    let samples = single_class_scenes(200, 5, 1);
    let mut wins = 0;
    for seed in 0..10u64 {
        let sizes = |beta: f64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dirichlet_partition(&samples, 4, beta, &mut rng).unwrap().iter().map(|s| s.samples.len()).collect()
        };
        if spread(&sizes(0.1)) > spread(&sizes(10.0)) {
            wins += 1;
        }
    }
    assert!(wins >= 9, "beta=0.1 more uneven in only {wins}/10 seeds");
}

#[test]
fn single_client_and_empty_partitions() {
    let samples = single_class_scenes(12, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shards = dirichlet_partition(&samples, 1, 0.5, &mut rng).unwrap();
    assert_eq!(shards.len(), 1);
    assert_eq!(shards[0].samples, samples);
    let empty = dirichlet_partition(&[], 3, 0.5, &mut rng).unwrap();
    assert!(empty.iter().all(|s| s.samples.is_empty()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_is_disjoint_and_covering(seed in 0u64..1000, k in 1usize..7, beta in 0.05f64..5.0, n in 0usize..40) {
        let samples: Vec<TerrainSample> = (0..n)
            .map(|i| gen_terrain(seed + i as u64, &[0, 1, 2], 4, 4, 2, 0.08).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shards = dirichlet_partition(&samples, k, beta, &mut rng).unwrap();
        prop_assert_eq!(shards.len(), k);
        let mut seen: Vec<TerrainSample> = shards.iter().flat_map(|s| s.samples.clone()).collect();
        prop_assert_eq!(seen.len(), n);
        let key = |s: &TerrainSample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        seen.sort_by_key(key);
        let mut expect = samples.clone();
        expect.sort_by_key(key);
        prop_assert_eq!(seen, expect);
    }

    #[test]
    fn buffer_stays_balanced_under_any_update_sequence(
        seed in 0u64..1000,
        capacity in 1usize..40,
        supplies in proptest::collection::vec(proptest::collection::vec(0usize..15, 1..4), 1..5),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = MemoryBuffer::new(capacity);
        let mut next_class = 0u8;
        for step in supplies {
            let mut cands = BTreeMap::new();
            for n in step {
                let samples: Vec<TerrainSample> = (0..n)
                    .map(|_| gen_terrain(rng.random(), &[next_class], 2, 2, 1, 0.0).unwrap())
                    .collect();
                let features = random_features(&mut rng, n, 3);
                cands.insert(next_class, Candidates { samples, features });
                next_class += 1;
            }
            let before = buf.exemplars().clone();
            buf.update(cands, next_class as usize).unwrap();
            prop_assert!(buf.len() <= capacity);
            let counts: Vec<usize> = buf.counts().values().copied().collect();
            if let (Some(max), Some(min)) = (counts.iter().max(), counts.iter().min()) {
                prop_assert!(max - min <= 1, "counts {:?}", counts);
            }
            for (class, old) in before {
                if let Some(now) = buf.exemplars().get(&class) {
                    prop_assert_eq!(&old[..now.len()], &now[..]);
                }
            }
        }
    }
}
