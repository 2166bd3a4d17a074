mod common;

use rand::seq::SliceRandom;
use rand::Rng;

use common::{median, rng, small_world};
use seqtag_core::corpus::{positives_only, Keep, Sentence, Split, TagSet, Token};
use seqtag_core::detector::{train_detector, DetectorConfig};
use seqtag_core::embeddings::EmbeddingMatrix;
use seqtag_core::pipeline::Pipeline;
use seqtag_core::tagger::{train_tagger, TrainConfig};
use seqtag_core::Corpus;

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden: 6,
        lr: 0.05,
        epochs,
        clip: 5.0,
        seed,
    }
}

/// Positives carry the sentinel token EVENTWORD; nothing else separates them.
fn eventword_corpus(seed: u64) -> (Corpus, EmbeddingMatrix) {
    let mut r = rng(seed);
    let vocab: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let sentences = (0..60)
        .map(|i| {
            let len = r.gen_range(3..8);
            let mut tokens: Vec<Token> = (0..len)
                .map(|_| Token::new(vocab.choose(&mut r).unwrap().clone(), "O"))
                .collect();
            if i % 5 == 0 {
                let at = r.gen_range(0..len);
                tokens[at] = Token::new("EVENTWORD", "B-eve");
            }
            Sentence::new(tokens)
        })
        .collect();
    let corpus = Corpus::from_sentences(sentences, TagSet::default(), Split::Train).unwrap();
    let mut words = vocab.clone();
    words.push("EVENTWORD".into());
    (corpus, EmbeddingMatrix::random(&words, 8, 1.0, seed))
}

#[test]
fn separable_detector_reaches_full_class_one_accuracy() {
    let (corpus, emb) = eventword_corpus(4);
    let config = DetectorConfig {
        train: TrainConfig {
            hidden: 4,
            lr: 0.05,
            epochs: 50,
            clip: 5.0,
            seed: 4,
        },
        filters: 4,
        ..DetectorConfig::default()
    };
    let (_, log) = train_detector(&corpus, &corpus, &emb, &config).unwrap();
    let reached = log.epochs.iter().position(|e| e.acc1 == Some(1.0));
    assert!(reached.is_some(), "{}", log.to_csv());
}

#[test]
fn tagger_loss_decreases_over_five_epochs() {
    let logs: Vec<Vec<f64>> = (0..5)
        .map(|seed| {
            let (c, emb) = small_world(seed, 200);
            let (_, log) = train_tagger(&c.train, &c.val, Keep::All, &emb, &quick(seed, 5)).unwrap();
            log.epochs.iter().map(|e| e.loss).collect()
        })
        .collect();
    let medians: Vec<f64> = (0..5).map(|e| median(logs.iter().map(|l| l[e]).collect())).collect();
    for w in medians.windows(2) {
        assert!(w[1] < w[0], "{medians:?}");
    }
}

#[test]
fn adaptive_output_differs_only_where_the_detector_fires() {
    let (c, emb) = small_world(2, 300);
    let cfg = quick(2, 2);
    let (strong, _) = train_tagger(&c.train, &c.val, Keep::Strong, &emb, &cfg).unwrap();
    let (weak, _) = train_tagger(&positives_only(&c.train), &positives_only(&c.val), Keep::Weak, &emb, &cfg).unwrap();
    let det_cfg = DetectorConfig {
        train: cfg.clone(),
        filters: 4,
        ..DetectorConfig::default()
    };
    let (det, _) = train_detector(&c.train, &c.val, &emb, &det_cfg).unwrap();

    let tags = |p: &Pipeline| -> Vec<(Vec<String>, Option<u8>)> {
        p.predict_corpus(&emb, &c.test)
            .unwrap()
            .into_iter()
            .map(|o| (o.tags, o.gate))
            .collect()
    };
    let strong_only = tags(&Pipeline::single(strong.clone()));
    let double = tags(&Pipeline::double(strong.clone(), weak.clone()));
    let adaptive = tags(&Pipeline::adaptive(strong, weak, det, 0.5));
    let mut flagged = 0;
    for ((a, s), d) in adaptive.iter().zip(&strong_only).zip(&double) {
        match a.1 {
            Some(0) => assert_eq!(a.0, s.0),
            Some(1) => {
                flagged += 1;
                assert_eq!(a.0, d.0);
            }
            other => panic!("adaptive gate {other:?}"),
        }
        assert_eq!(d.1, Some(1));
    }
    assert!(flagged > 0 && flagged < c.test.len(), "flagged {flagged} of {}", c.test.len());
}
