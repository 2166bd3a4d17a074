//! Oracles and fixtures shared by the integration tests and the acceptance
//! target. Each oracle is written independently of the library code it
//! checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqtag_core::autodiff::{Graph, ParamStore, Tensor};
use seqtag_core::crf;
use seqtag_core::detector::{weighted_bce, weighted_bce_node, ClassWeights};
use seqtag_core::corpus::{positives_only, write_conll_predictions, Keep};
use seqtag_core::detector::{train_detector, DetectorConfig};
use seqtag_core::encoder::{bilstm_encode, emission_scores, init_bilstm, init_emission};
use seqtag_core::pipeline::Pipeline;
use seqtag_core::synth::{clustered_vectors, SynthCorpus, SynthSpec, VectorSpec};
use seqtag_core::tagger::{train_tagger, TrainConfig};
use seqtag_core::EmbeddingMatrix;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// A random CRF instance: emissions `T×K` and transitions `(K+2)×(K+2)`.
pub fn crf_instance(rng: &mut ChaCha8Rng, max_t: usize, min_k: usize, max_k: usize) -> (Tensor, Tensor) {
    let t = rng.gen_range(1..=max_t);
    let k = rng.gen_range(min_k..=max_k);
    let p = random_tensor(rng, &[t, k], 3.0);
    let a = random_tensor(rng, &[k + 2, k + 2], 3.0);
    (p, a)
}

/// Every tag sequence of length `t` over `k` tags, in lexicographic order.
pub fn all_sequences(t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..k).map(move |j| {
                    let mut s = prefix.clone();
                    s.push(j);
                    s
                })
            })
            .collect();
    }
    out
}

/// Path score with START = K and END = K+1, computed from scratch.
pub fn brute_score(p: &Tensor, a: &Tensor, y: &[usize]) -> f64 {
    let k = p.cols();
    let (start, end) = (k, k + 1);
    let mut s = a.at(start, y[0]) + a.at(y[y.len() - 1], end);
    for (i, &tag) in y.iter().enumerate() {
        s += p.at(i, tag);
        if i > 0 {
            s += a.at(y[i - 1], tag);
        }
    }
    s
}

pub struct Enumerated {
    pub log_z: f64,
    pub best: Vec<usize>,
    pub best_score: f64,
    /// `T×K`, row-major.
    pub marginals: Vec<f64>,
}

pub fn enumerate(p: &Tensor, a: &Tensor) -> Enumerated {
    let (t, k) = (p.rows(), p.cols());
    let seqs = all_sequences(t, k);
    let scores: Vec<f64> = seqs.iter().map(|y| brute_score(p, a, y)).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let mut marginals = vec![0.0; t * k];
    for (y, s) in seqs.iter().zip(&scores) {
        let w = (s - log_z).exp();
        for (i, &tag) in y.iter().enumerate() {
            marginals[i * k + tag] += w;
        }
    }
    Enumerated {
        log_z,
        best: seqs[best].clone(),
        best_score: scores[best],
        marginals,
    }
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Worst relative error of the CRF loss gradient w.r.t. `P` and `A`.
pub fn crf_gradient_errors(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    // One tag makes the emission gradient identically zero.
    let (p, a) = crf_instance(&mut r, 5, 2, 4);
    let (t, k) = (p.rows(), p.cols());
    let y: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();

    let mut g = Graph::new();
    let pv = g.leaf(p.clone().with_requires_grad(true));
    let av = g.leaf(a.clone().with_requires_grad(true));
    let loss = crf::nll_node(&mut g, pv, av, &y).unwrap();
    let grads = g.backward(loss).unwrap();

    let brute_nll = |p: &Tensor, a: &Tensor| enumerate(p, a).log_z - brute_score(p, a, &y);
    let shape_p = p.shape().to_vec();
    let shape_a = a.shape().to_vec();
    let num_p = numeric_gradient(p.values(), |v| brute_nll(&Tensor::new(shape_p.clone(), v.to_vec()).unwrap(), &a));
    let num_a = numeric_gradient(a.values(), |v| brute_nll(&p, &Tensor::new(shape_a.clone(), v.to_vec()).unwrap()));
    (
        relative_error(grads.get(pv).unwrap(), &num_p),
        relative_error(grads.get(av).unwrap(), &num_a),
    )
}

/// Worst relative error over every parameter and the input of the chain
/// embeddings → Bi-LSTM → emissions → CRF loss.
pub fn encoder_chain_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = r.gen_range(1..=4);
    let (d, h, k) = (3, 3, r.gen_range(2..=4));
    let mut store = ParamStore::new();
    init_bilstm(&mut store, "enc", d, h, &mut r);
    init_emission(&mut store, "emit", 2 * h, k, &mut r);
    store.insert("crf", random_tensor(&mut r, &[k + 2, k + 2], 1.0));
    // Randomise biases too, so no gradient is structurally zero.
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in &names {
        let shape = store.get(n).unwrap().shape().to_vec();
        *store.get_mut(n).unwrap() = random_tensor(&mut r, &shape, 0.8);
    }
    let x = random_tensor(&mut r, &[t, d], 1.0);
    let y: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();

    let loss_of = |store: &ParamStore, x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let hv = bilstm_encode(&mut g, store, "enc", xv).unwrap();
        let pv = emission_scores(&mut g, store, "emit", hv).unwrap();
        let av = g.param(store, "crf").unwrap();
        let loss = crf::nll_node(&mut g, pv, av, &y).unwrap();
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let hv = bilstm_encode(&mut g, &store, "enc", xv).unwrap();
    let pv = emission_scores(&mut g, &store, "emit", hv).unwrap();
    let av = g.param(&store, "crf").unwrap();
    let loss = crf::nll_node(&mut g, pv, av, &y).unwrap();
    let grads = g.backward(loss).unwrap();
    let param_grads = g.param_grads(&grads, &store);

    let mut worst: f64 = 0.0;
    for (i, name) in names.iter().enumerate() {
        let base = store.get(name).unwrap().values().to_vec();
        let mut probe = store.clone();
        let numeric = numeric_gradient(&base, |v| {
            probe.get_mut(name).unwrap().values_mut().copy_from_slice(v);
            loss_of(&probe, &x)
        });
        worst = worst.max(relative_error(&param_grads[i], &numeric));
    }
    let numeric_x = numeric_gradient(x.values(), |v| loss_of(&store, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()));
    worst.max(relative_error(grads.get(xv).unwrap(), &numeric_x))
}

/// Relative error of the weighted cross-entropy gradient w.r.t. the logits.
pub fn weighted_bce_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z = random_tensor(&mut r, &[1, 2], 4.0);
    let target = r.gen_range(0..2u8);
    let w0 = r.gen_range(0.01..0.99);
    let weights = ClassWeights::new(w0, 1.0 - w0).unwrap();

    let mut g = Graph::new();
    let zv = g.leaf(z.clone().with_requires_grad(true));
    let loss = weighted_bce_node(&mut g, zv, target, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let numeric = numeric_gradient(z.values(), |v| {
        let m = v[0].max(v[1]);
        let (e0, e1) = ((v[0] - m).exp(), (v[1] - m).exp());
        weighted_bce((e0 / (e0 + e1), e1 / (e0 + e1)), target, &weights)
    });
    relative_error(grads.get(zv).unwrap(), &numeric)
}


/// A small synthetic corpus and its word vectors.
pub fn small_world(seed: u64, train: usize) -> (SynthCorpus, EmbeddingMatrix) {
    let spec = SynthSpec {
        seed,
        train_sentences: train,
        val_sentences: 100,
        test_sentences: 200,
        ..SynthSpec::default()
    };
    let corpus = spec.generate().unwrap();
    let emb = clustered_vectors(
        &corpus,
        &VectorSpec {
            seed,
            ..VectorSpec::default()
        },
    )
    .unwrap();
    (corpus, emb)
}

/// Log, checkpoint and prediction bytes of one small end-to-end run.
pub fn end_to_end_bytes(seed: u64) -> (Vec<String>, Vec<Vec<u8>>, Vec<u8>) {
    let (c, emb) = small_world(seed, 150);
    let cfg = TrainConfig {
        hidden: 4,
        lr: 0.05,
        epochs: 2,
        clip: 5.0,
        seed,
    };
    let (strong, ls) = train_tagger(&c.train, &c.val, Keep::Strong, &emb, &cfg).unwrap();
    let (weak, lw) = train_tagger(&positives_only(&c.train), &positives_only(&c.val), Keep::Weak, &emb, &cfg).unwrap();
    let det_cfg = DetectorConfig {
        train: cfg,
        filters: 3,
        ..DetectorConfig::default()
    };
    let (det, ld) = train_detector(&c.train, &c.val, &emb, &det_cfg).unwrap();
    let mut checkpoints = Vec::new();
    for ck in [strong.to_checkpoint(), weak.to_checkpoint(), det.to_checkpoint()] {
        let mut b = Vec::new();
        ck.write(&mut b).unwrap();
        checkpoints.push(b);
    }
    let p = Pipeline::adaptive(strong, weak, det, 0.5);
    let tags: Vec<Vec<String>> = p.predict_corpus(&emb, &c.test).unwrap().into_iter().map(|o| o.tags).collect();
    let mut out = Vec::new();
    write_conll_predictions(&c.test, &tags, &mut out).unwrap();
    (vec![ls.to_csv(), lw.to_csv(), ld.to_csv()], checkpoints, out)
}
