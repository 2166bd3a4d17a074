mod common;

use common::{end_to_end_bytes as run, small_world};
use seqtag_core::corpus::Keep;
use seqtag_core::parallel::map_sequential;
use seqtag_core::pipeline::Pipeline;
use seqtag_core::tagger::{train_tagger, TrainConfig};

#[test]
fn repeated_runs_are_byte_identical() {
    let a = run(5);
    let b = run(5);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_ne!(a.1, run(6).1);
}

#[test]
fn parallel_prediction_matches_sequential() {
    let (c, emb) = small_world(1, 150);
    let cfg = TrainConfig {
        hidden: 4,
        lr: 0.05,
        epochs: 1,
        clip: 5.0,
        seed: 1,
    };
    let (tagger, _) = train_tagger(&c.train, &c.val, Keep::All, &emb, &cfg).unwrap();
    let p = Pipeline::single(tagger);
    let fanned: Vec<Vec<String>> = p.predict_corpus(&emb, &c.test).unwrap().into_iter().map(|o| o.tags).collect();
    let serial: Vec<Vec<String>> = map_sequential(&c.test.sentences, |s| p.predict(&emb, &s.surfaces()).unwrap());
    assert_eq!(fanned, serial);
}
