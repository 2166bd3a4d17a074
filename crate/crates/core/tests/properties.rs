use proptest::prelude::*;

use seqtag_core::autodiff::Tensor;
use seqtag_core::corpus::{read_corpus, write_conll, Format, Split, TagSet};
use seqtag_core::crf::{log_partition, nll, posterior_marginals, sequence_score, viterbi};
use seqtag_core::metrics::{count_confusion, f1_macro};

fn instance() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..5).prop_flat_map(|(t, k)| {
        (
            prop::collection::vec(-5.0f64..5.0, t * k),
            prop::collection::vec(-5.0f64..5.0, (k + 2) * (k + 2)),
        )
            .prop_map(move |(p, a)| {
                (
                    Tensor::matrix(t, k, p).unwrap(),
                    Tensor::matrix(k + 2, k + 2, a).unwrap(),
                )
            })
    })
}

const TAGS: [&str; 5] = ["O", "B-geo", "I-geo", "B-art", "B-per"];

fn sentences() -> impl Strategy<Value = Vec<Vec<(String, usize)>>> {
    prop::collection::vec(prop::collection::vec(("[a-zA-Z]{1,8}", 0usize..TAGS.len()), 1..8), 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn marginal_rows_sum_to_one((p, a) in instance()) {
        let m = posterior_marginals(&p, &a).unwrap();
        for r in 0..m.rows() {
            let s: f64 = m.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_bounded_by_partition((p, a) in instance()) {
        let (path, score) = viterbi(&p, &a).unwrap();
        prop_assert!((sequence_score(&p, &a, &path).unwrap() - score).abs() < 1e-9);
        prop_assert!(score <= log_partition(&p, &a).unwrap() + 1e-9);
        prop_assert!(nll(&p, &a, &path).unwrap() >= -1e-9);
    }

    #[test]
    fn emission_shift_moves_partition_by_t_times_c((p, a) in instance(), c in -3.0f64..3.0) {
        let shifted = Tensor::matrix(p.rows(), p.cols(), p.values().iter().map(|x| x + c).collect()).unwrap();
        let d = log_partition(&shifted, &a).unwrap() - log_partition(&p, &a).unwrap();
        prop_assert!((d - c * p.rows() as f64).abs() < 1e-8);
    }

    #[test]
    fn conll_round_trip(sents in sentences()) {
        let mut text = String::new();
        for s in &sents {
            for (w, t) in s {
                text.push_str(&format!("{w}\t{}\n", TAGS[*t]));
            }
            text.push('\n');
        }
        let c = read_corpus(text.as_bytes(), Format::Conll2, TagSet::default(), Split::Train).unwrap();
        prop_assert_eq!(c.len(), sents.len());
        let mut out = Vec::new();
        write_conll(&c, &mut out).unwrap();
        prop_assert_eq!(String::from_utf8(out.clone()).unwrap(), text);
        let again = read_corpus(out.as_slice(), Format::Conll2, TagSet::default(), Split::Train).unwrap();
        prop_assert_eq!(again, c);
    }

    #[test]
    fn f1_scores_stay_in_unit_interval(
        pairs in prop::collection::vec((0usize..TAGS.len(), 0usize..TAGS.len()), 1..40)
    ) {
        let pred: Vec<&str> = pairs.iter().map(|(p, _)| TAGS[*p]).collect();
        let gold: Vec<&str> = pairs.iter().map(|(_, g)| TAGS[*g]).collect();
        let counts = count_confusion(&pred, &gold).unwrap();
        let f1s: Vec<f64> = counts.classes().filter_map(|(_, k)| k.f1()).collect();
        for f in &f1s {
            prop_assert!((0.0..=1.0).contains(f));
        }
        if !f1s.is_empty() {
            let m = f1_macro(&f1s).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
