// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;

use proptest::prelude::*;
use protoseq::corpus::EncodedConversation;
use protoseq::episodes::{Episode, EpisodeSampler, EpisodeSpec};
use protoseq::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(id: usize, labels: &[usize]) -> EncodedConversation {
    EncodedConversation {
        id: format!("c{id}"),
        utterances: labels.iter().map(|_| vec![2]).collect(),
        labels: labels.to_vec(),
    }
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("label{i}")).collect()
}

fn assert_invariants(ep: &Episode, convs: &[EncodedConversation], spec: &EpisodeSpec) {
    let mut seen = HashSet::new();
    for id in ep.support_ids().chain(ep.query_ids()) {
        assert!(seen.insert(id), "conversation {id} drawn twice");
    }
    for k in 0..spec.n_ways {
        assert_eq!(ep.support[k].len(), spec.n_shots);
        assert_eq!(ep.query[k].len(), spec.n_queries);
        for &c in ep.support[k].iter().chain(&ep.query[k]) {
            assert!(convs[c].labels.iter().take(spec.max_len).any(|&l| l == k));
        }
        let support_msgs = ep
            .support_ids()
            .flat_map(|c| convs[c].labels.iter().take(spec.max_len))
            .filter(|&&l| l == k)
            .count();
        assert!(support_msgs >= spec.n_shots);
    }
}

#[test]
fn inclusion_frequencies_are_binomial() {
    const EPISODES: usize = 10_000;
    const PER_CLASS: usize = 8;
    let k = 3;
    let convs: Vec<_> = (0..k * PER_CLASS).map(|i| conv(i, &[i % k, i % k])).collect();
    let spec = EpisodeSpec::new(k, 2, 3, 35);
    let sampler = EpisodeSampler::new(&convs, &names(k), spec).unwrap();
    let mut support = vec![0usize; convs.len()];
    let mut included = vec![0usize; convs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..EPISODES {
        let ep = sampler.sample(&mut rng).unwrap();
        ep.support_ids().for_each(|c| support[c] += 1);
        ep.support_ids().chain(ep.query_ids()).for_each(|c| included[c] += 1);
    }
    let n = EPISODES as f64;
    let within = |counts: &[usize], p: f64| {
        let sigma = (n * p * (1.0 - p)).sqrt();
        counts.iter().all(|&c| (c as f64 - n * p).abs() <= 3.0 * sigma)
    };
    let p_incl = (spec.n_shots + spec.n_queries) as f64 / PER_CLASS as f64;
    let p_support = spec.n_shots as f64 / PER_CLASS as f64;
    assert!(within(&included, p_incl), "{included:?}");
    assert!(within(&support, p_support), "{support:?}");
}

#[test]
fn same_seed_same_episodes() {
    let convs: Vec<_> = (0..30).map(|i| conv(i, &[i % 3, (i / 3) % 3, (i + 1) % 3])).collect();
    let sampler = EpisodeSampler::new(&convs, &names(3), EpisodeSpec::new(3, 2, 2, 35)).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200).map(|_| sampler.sample(&mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn max_len_limits_eligibility() {
    let mut convs: Vec<_> = (0..6).map(|i| conv(i, &[0, 0, 1])).collect();
    convs.extend((6..12).map(|i| conv(i, &[1, 1])));
    let labels = names(2);
    let spec = EpisodeSpec::new(2, 1, 1, 2);
    let sampler = EpisodeSampler::new(&convs, &labels, spec).unwrap();
    assert_eq!(sampler.eligible(1), &[6, 7, 8, 9, 10, 11]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert_invariants(&sampler.sample(&mut rng).unwrap(), &convs, &spec);
    }
}

#[test]
fn shared_pool_shortage_is_infeasible() {
    let convs: Vec<_> = (0..5).map(|i| conv(i, &[0, 1])).collect();
    let sampler = EpisodeSampler::new(&convs, &names(2), EpisodeSpec::new(2, 2, 1, 35)).unwrap();
    match sampler.check_feasible() {
        Err(Error::Infeasible { needed, .. }) => assert_eq!(needed, 3),
        other => panic!("expected infeasibility, got {other:?}"),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sampler.sample(&mut rng), Err(Error::Infeasible { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_corpora_keep_invariants(
        raw in prop::collection::vec(prop::collection::vec(0usize..3, 1..6), 4..30),
        shots in 1usize..3,
        queries in 1usize..3,
        seed in any::<u64>(),
    ) {
        let convs: Vec<_> = raw.iter().enumerate().map(|(i, l)| conv(i, l)).collect();
        let spec = EpisodeSpec::new(3, shots, queries, 4);
        let sampler = EpisodeSampler::new(&convs, &names(3), spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sampler.check_feasible() {
            Ok(()) => {
                if let Ok(ep) = sampler.sample(&mut rng) {
                    assert_invariants(&ep, &convs, &spec);
                }
            }
            Err(e) => {
                prop_assert!(matches!(e, Error::Infeasible { .. }), "unexpected error {}", e);
                prop_assert!(sampler.sample(&mut rng).is_err());
            }
        }
    }
}
