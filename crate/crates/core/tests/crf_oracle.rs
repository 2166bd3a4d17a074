mod common;

use common::{crf_instance, enumerate, rng};
use seqtag_core::crf::{log_partition, posterior_marginals, sequence_score, viterbi};

#[test]
fn two_hundred_instances_match_enumeration() {
    let mut r = rng(11);
    for case in 0..200 {
        let (p, a) = crf_instance(&mut r, 5, 1, 4);
        let e = enumerate(&p, &a);
        let log_z = log_partition(&p, &a).unwrap();
        assert!((log_z - e.log_z).abs() < 1e-8, "case {case}: {log_z} vs {}", e.log_z);
        let (path, score) = viterbi(&p, &a).unwrap();
        assert_eq!(path, e.best, "case {case}");
        assert!((score - e.best_score).abs() < 1e-8);
        let m = posterior_marginals(&p, &a).unwrap();
        for (x, y) in m.values().iter().zip(&e.marginals) {
            assert!((x - y).abs() < 1e-8, "case {case}");
        }
    }
}

#[test]
fn sequence_score_matches_hand_sum() {
    let mut r = rng(3);
    for _ in 0..50 {
        let (p, a) = crf_instance(&mut r, 5, 1, 4);
        let y: Vec<usize> = (0..p.rows()).map(|i| i % p.cols()).collect();
        let s = sequence_score(&p, &a, &y).unwrap();
        assert!((s - common::brute_score(&p, &a, &y)).abs() < 1e-12);
    }
}
