mod common;

use common::oracles::{oracle_top_k, random_pairs, seeded};
use mapl::datafilter::{filter_threshold, filter_top_k, parse_tsv, subsample_fraction, to_tsv, Rule};
use rand::Rng;

#[test]
fn top_k_equals_sort_and_truncate() {
    let pairs = random_pairs(10_000, 1);
    let distinct: std::collections::HashSet<u64> = pairs.iter().map(|p| p.score.to_bits()).collect();
    assert!(distinct.len() < pairs.len() / 10, "scores should repeat");
    for k in [1, 2, 17, 500, 4_999, 9_999, 10_000] {
        assert_eq!(filter_top_k(&pairs, k).unwrap(), oracle_top_k(&pairs, k), "k={k}");
    }
}

#[test]
fn threshold_equals_top_k_of_its_count() {
    let pairs = random_pairs(10_000, 2);
    let mut rng = seeded(3);
    for _ in 0..100 {
        let t = rng.random_range(-1.2..3.2);
        let by_threshold = filter_threshold(&pairs, t).unwrap();
        let count = pairs.iter().filter(|p| p.score >= t).count();
        assert_eq!(by_threshold.len(), count);
        if count > 0 {
            assert_eq!(by_threshold, filter_top_k(&pairs, count).unwrap(), "t={t}");
        }
    }
}

#[test]
fn fraction_sample_is_seeded_and_sized() {
    let pairs = random_pairs(1_000, 4);
    let a = subsample_fraction(&pairs, 0.1, 9).unwrap();
    let b = subsample_fraction(&pairs, 0.1, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 100);
    assert_ne!(a, subsample_fraction(&pairs, 0.1, 10).unwrap());
}

#[test]
fn tsv_round_trip() {
    let pairs = random_pairs(50, 5);
    let kept = filter_top_k(&pairs, 10).unwrap();
    let text = to_tsv(&kept, pairs.len(), Rule::TopK(10));
    assert!(text.starts_with("# kept=10 of=50 rule=topk param=10\n"));
    assert_eq!(parse_tsv(&text, "t").unwrap(), kept);
}
