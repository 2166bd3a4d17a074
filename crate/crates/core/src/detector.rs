//! Sentence-level detector for the presence of Weak-type entities.
//!
//! Embeddings feed a Bi-LSTM; 1-D convolutions of several widths run over
//! the Bi-LSTM states, each followed by ReLU and max-over-time pooling; the
//! pooled features go through a 2-way affine layer and a softmax.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{glorot_uniform, sgd_step, Graph, ParamStore, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{balanced_subsample, detector_counts, detector_labels, Corpus, PAD};
use crate::embeddings::EmbeddingMatrix;
use crate::encoder::{bilstm_encode, init_bilstm};
use crate::error::{Error, Result};
use crate::tagger::TrainConfig;

const ENCODER: &str = "det.enc";
const OUT_W: &str = "det.out.w";
const OUT_B: &str = "det.out.b";

/// Floor applied to a target-class score before taking its log.
pub const SCORE_FLOOR: f64 = 1e-12;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// How many times [`weighted_bce`] has clamped a zero score.
pub fn clamp_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// Per-class loss weights, normalised to sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    w0: f64,
    w1: f64,
}

impl ClassWeights {
    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0 > 0.0 && w1 > 0.0 && w0.is_finite() && w1.is_finite()) {
            return Err(Error::Domain(format!("class weights must be positive, got ({w0}, {w1})")));
        }
        let s = w0 + w1;
        Ok(ClassWeights { w0: w0 / s, w1: w1 / s })
    }

    pub fn uniform() -> Self {
        ClassWeights { w0: 0.5, w1: 0.5 }
    }

    /// Each class weighted by the other's frequency:
    /// `w0 = n1/(n0+n1)`, `w1 = n0/(n0+n1)`.
    pub fn from_counts(n0: usize, n1: usize) -> Result<Self> {
        if n0 == 0 || n1 == 0 {
            return Err(Error::Domain(format!(
                "class weights need both classes present, got {n0} negatives and {n1} positives"
            )));
        }
        Self::new(n1 as f64, n0 as f64)
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn for_class(&self, class: u8) -> f64 {
        if class == 1 {
            self.w1
        } else {
            self.w0
        }
    }
}

pub fn compute_class_weights(corpus: &Corpus) -> Result<ClassWeights> {
    let (n0, n1) = detector_counts(corpus);
    ClassWeights::from_counts(n0, n1)
}

/// `−w0·t0·ln s0 − w1·t1·ln s1` for a one-hot target.
pub fn weighted_bce(scores: (f64, f64), target: u8, weights: &ClassWeights) -> f64 {
    let s = if target == 1 { scores.1 } else { scores.0 };
    let s = if s < SCORE_FLOOR {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        log::warn!("target-class score {s} clamped to {SCORE_FLOOR}");
        SCORE_FLOOR
    } else {
        s
    };
    -weights.for_class(target) * s.ln()
}

/// Records the weighted loss on 2-way logits (`1×2`).
pub fn weighted_bce_node(g: &mut Graph, logits: Var, target: u8, weights: &ClassWeights) -> Result<Var> {
    let lse = g.log_sum_exp(logits, None)?;
    let picked = g.gather(logits, &[usize::from(target == 1)])?;
    let nll = g.sub(lse, picked)?;
    Ok(g.scale(nll, weights.for_class(target)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Weights from inverse class frequencies.
    Weighted,
    /// `w0 = w1 = 0.5`.
    Unweighted,
}

/// How the kept epoch is chosen from the per-epoch validation scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Highest class-1 accuracy.
    Acc1,
    /// Highest class-1 accuracy among epochs with at least as many true as
    /// false positives (equivalently, overall accuracy no worse than always
    /// predicting 0); falls back to [`Selection::Acc1`] if no epoch
    /// qualifies. A detector that flags everything scores acc1 = 1, so the
    /// plain rule can lock onto a degenerate early epoch.
    Acc1Precise,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc1" => Ok(Selection::Acc1),
            "acc1-precise" => Ok(Selection::Acc1Precise),
            other => Err(Error::Config(format!("unknown selection rule {other:?} (acc1 | acc1-precise)"))),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selection::Acc1 => "acc1",
            Selection::Acc1Precise => "acc1-precise",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub train: TrainConfig,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub weighting: Weighting,
    pub balanced: bool,
    pub threshold: f64,
    pub selection: Selection,
    /// Scale the learning rate so one epoch of weighted updates carries the
    /// same total class weight as an unweighted epoch (0.5 per sentence).
    /// Normalised weights otherwise shrink every step on imbalanced data.
    pub rescale_lr: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            train: TrainConfig::default(),
            widths: vec![2, 3, 4],
            filters: 50,
            weighting: Weighting::Weighted,
            balanced: false,
            threshold: 0.5,
            selection: Selection::Acc1Precise,
            rescale_lr: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    params: ParamStore,
    widths: Vec<usize>,
    filters: usize,
}

fn conv_names(width: usize) -> (String, String) {
    (format!("det.conv{width}.w"), format!("det.conv{width}.b"))
}

impl Detector {
    pub fn new(input_dim: usize, hidden: usize, widths: &[usize], filters: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(input_dim, hidden, widths, filters, &mut rng)
    }

    fn with_rng(input_dim: usize, hidden: usize, widths: &[usize], filters: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || filters == 0 {
            return Err(Error::Config("conv widths and filter count must be positive".into()));
        }
        let mut params = ParamStore::new();
        init_bilstm(&mut params, ENCODER, input_dim, hidden, rng);
        for &w in widths {
            let (wn, bn) = conv_names(w);
            let fan_in = w * 2 * hidden;
            params.insert(wn, glorot_uniform(rng, &[filters, fan_in], fan_in, filters));
            params.insert(bn, Tensor::zeros(&[filters]));
        }
        let feat = widths.len() * filters;
        params.insert(OUT_W, glorot_uniform(rng, &[2, feat], feat, 2));
        params.insert(OUT_B, Tensor::zeros(&[2]));
        Ok(Detector {
            params,
            widths: widths.to_vec(),
            filters,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Input matrix for the real (non-PAD) tokens.
    fn input<S: AsRef<str>>(emb: &EmbeddingMatrix, tokens: &[S]) -> Result<Tensor> {
        let real: Vec<&str> = tokens.iter().map(AsRef::as_ref).filter(|t| *t != PAD).collect();
        if real.is_empty() {
            return Err(Error::Domain("detector input has no tokens".into()));
        }
        emb.sentence_matrix(&real)
    }

    /// Records the 2-way logits for `x: T×d`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = bilstm_encode(g, &self.params, ENCODER, x)?;
        let (t, c) = (g.value(h).rows(), g.value(h).cols());
        let mut pooled = Vec::with_capacity(self.widths.len());
        for &w in &self.widths {
            let (wn, bn) = conv_names(w);
            let mut filt = g.param(&self.params, &wn)?;
            let bias = g.param(&self.params, &bn)?;
            let eff = w.min(t);
            if eff < w {
                filt = g.slice_cols(filt, 0, eff * c)?;
            }
            let windows = g.unfold(h, eff)?;
            let conv = g.matmul_nt(windows, filt)?;
            let conv = g.add_row(conv, bias)?;
            let act = g.relu(conv);
            pooled.push(g.max_rows(act)?);
        }
        let feats = g.concat_cols(&pooled)?;
        let w = g.param(&self.params, OUT_W)?;
        let b = g.param(&self.params, OUT_B)?;
        let z = g.matmul_nt(feats, w)?;
        g.add_row(z, b)
    }

    /// Softmax scores `(s0, s1)`. PAD tokens are ignored.
    pub fn forward<S: AsRef<str>>(&self, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let x = g.constant(Self::input(emb, tokens)?);
        let z = self.logits(&mut g, x)?;
        let z = g.value(z).values();
        let m = z[0].max(z[1]);
        let (e0, e1) = ((z[0] - m).exp(), (z[1] - m).exp());
        Ok((e0 / (e0 + e1), e1 / (e0 + e1)))
    }

    pub fn predict<S: AsRef<str>>(&self, emb: &EmbeddingMatrix, tokens: &[S], threshold: f64) -> Result<u8> {
        let (_, s1) = self.forward(emb, tokens)?;
        Ok(u8::from(s1 >= threshold))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "detector")
            .with_meta("widths", widths.join(","))
            .with_meta("filters", self.filters)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "detector" {
            return Err(Error::Checkpoint(format!("expected a detector checkpoint, found {}", ck.meta("kind")?)));
        }
        let widths = ck
            .meta("widths")?
            .split(',')
            .map(|w| w.parse().map_err(|_| Error::Checkpoint(format!("bad width {w:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let filters = ck.meta_parsed("filters")?;
        for &w in &widths {
            ck.params.require(&conv_names(w).0)?;
        }
        ck.params.require(OUT_W)?;
        Ok(Detector {
            params: ck.params.clone(),
            widths,
            filters,
        })
    }
}

/// Free-function form of [`Detector::forward`].
pub fn detector_forward<S: AsRef<str>>(det: &Detector, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<(f64, f64)> {
    det.forward(emb, tokens)
}

/// Per-class accuracy; `None` for a class with no samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub acc0: Option<f64>,
    pub acc1: Option<f64>,
}

/// Accuracy from `(gold, predicted)` pairs.
pub fn class_accuracy(pairs: impl IntoIterator<Item = (u8, u8)>) -> ClassAccuracy {
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (gold, pred) in pairs {
        let c = usize::from(gold == 1);
        total[c] += 1;
        if gold == pred {
            correct[c] += 1;
        }
    }
    let acc = |c: usize| (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64);
    ClassAccuracy { acc0: acc(0), acc1: acc(1) }
}

/// Predicted detector labels for every sentence.
pub fn predict_corpus(det: &Detector, emb: &EmbeddingMatrix, corpus: &Corpus, threshold: f64) -> Result<Vec<u8>> {
    crate::parallel::try_map(&corpus.sentences, |s| det.predict(emb, &s.surfaces(), threshold))
}

pub fn detector_class_accuracy(det: &Detector, emb: &EmbeddingMatrix, corpus: &Corpus, threshold: f64) -> Result<ClassAccuracy> {
    let labelled = if corpus.sentences.iter().all(|s| s.detector_label.is_some()) {
        corpus.clone()
    } else {
        detector_labels(corpus)
    };
    let preds = predict_corpus(det, emb, &labelled, threshold)?;
    Ok(class_accuracy(
        labelled
            .sentences
            .iter()
            .zip(preds)
            .map(|(s, p)| (s.detector_label.unwrap_or(0), p)),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub acc0: Option<f64>,
    pub acc1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorLog {
    pub weights: ClassWeights,
    pub epochs: Vec<DetectorEpoch>,
    pub best_epoch: usize,
}

impl DetectorLog {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |x| x.to_string());
        let mut out = String::from("epoch,loss,acc0,acc1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, fmt(e.acc0), fmt(e.acc1));
        }
        out
    }
}

/// Ratio of the uniform per-sentence weight (0.5) to the mean class weight
/// over `corpus`; 1 for uniform weights or balanced data.
pub fn lr_scale(corpus: &Corpus, weights: &ClassWeights) -> f64 {
    let (n0, n1) = detector_counts(corpus);
    let mass = weights.w0() * n0 as f64 + weights.w1() * n1 as f64;
    if mass > 0.0 {
        0.5 * (n0 + n1) as f64 / mass
    } else {
        1.0
    }
}

/// Trains with SGD, one sentence per step, keeping the epoch with the best
/// validation class-1 accuracy under `config.selection` (earliest on ties).
pub fn train_detector(
    train: &Corpus,
    val: &Corpus,
    emb: &EmbeddingMatrix,
    config: &DetectorConfig,
) -> Result<(Detector, DetectorLog)> {
    config.train.validate()?;
    let mut train = detector_labels(train);
    if config.balanced {
        train = balanced_subsample(&train, config.train.seed)?;
    }
    let val = detector_labels(val);
    let (val_n0, val_n1) = detector_counts(&val);
    let weights = match config.weighting {
        Weighting::Weighted => compute_class_weights(&train)?,
        Weighting::Unweighted => ClassWeights::uniform(),
    };
    let lr = if config.rescale_lr {
        config.train.lr * lr_scale(&train, &weights)
    } else {
        config.train.lr
    };
    log::info!("detector class weights w0={} w1={} lr={lr}", weights.w0(), weights.w1());

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut det = Detector::with_rng(emb.dim(), config.train.hidden, &config.widths, config.filters, &mut rng)?;
    let examples: Vec<(Tensor, u8)> = train
        .sentences
        .iter()
        .map(|s| Ok((Detector::input(emb, &s.surfaces())?, s.detector_label.unwrap_or(0))))
        .collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(Error::Config("empty detector training set".into()));
    }

    let mut log = DetectorLog {
        weights,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<((bool, f64), Detector)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (x, target) = &examples[i];
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let z = det.logits(&mut g, xv)?;
            let loss = weighted_bce_node(&mut g, z, *target, &weights)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    param: "loss".into(),
                    msg: format!("non-finite detector loss at epoch {epoch}, sentence {i}"),
                });
            }
            total += value;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &det.params);
            sgd_step(&mut det.params, &pg, lr, config.train.clip)?;
        }
        let loss = total / examples.len() as f64;
        let acc = detector_class_accuracy(&det, emb, &val, config.threshold)?;
        log::info!("detector epoch {epoch}: loss {loss:.5} acc0 {:?} acc1 {:?}", acc.acc0, acc.acc1);
        log.epochs.push(DetectorEpoch {
            epoch,
            loss,
            acc0: acc.acc0,
            acc1: acc.acc1,
        });
        let acc1 = acc.acc1.unwrap_or(f64::NEG_INFINITY);
        let precise = match config.selection {
            Selection::Acc1 => true,
            Selection::Acc1Precise => {
                let tp = acc.acc1.unwrap_or(0.0) * val_n1 as f64;
                let fp = (1.0 - acc.acc0.unwrap_or(1.0)) * val_n0 as f64;
                tp + 1e-9 >= fp
            }
        };
        let score = (precise, acc1);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, det.clone()));
            log.best_epoch = epoch;
        }
    }
    Ok((best.expect("at least one epoch").1, log))
}
