//! Bi-LSTM-CRF sequence tagger and its training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Graph, ParamStore, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{mask_labels, Corpus, Keep, OUTSIDE};
use crate::crf::{self, CrfParams};
use crate::embeddings::EmbeddingMatrix;
use crate::encoder::{bilstm_encode, emission_scores, init_bilstm, init_emission};
use crate::error::{Error, Result};
use crate::metrics::report_sequences;
use crate::pipeline::Prediction;

pub const ENCODER: &str = "enc";
pub const EMISSION: &str = "emit";
pub const TRANSITIONS: &str = "crf.transitions";

/// Hyperparameters shared by the tagger and detector training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 100,
            lr: 0.01,
            epochs: 10,
            clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 {
            return Err(Error::Config("hidden size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("lr and clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tagger {
    labels: Vec<String>,
    keep: Keep,
    params: ParamStore,
}

impl Tagger {
    pub fn new(labels: Vec<String>, keep: Keep, input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(labels, keep, input_dim, hidden, &mut rng)
    }

    fn with_rng(labels: Vec<String>, keep: Keep, input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = labels.len();
        let mut params = ParamStore::new();
        init_bilstm(&mut params, ENCODER, input_dim, hidden, rng);
        init_emission(&mut params, EMISSION, 2 * hidden, k, rng);
        params.insert(TRANSITIONS, CrfParams::random(rng, k).into_tensor());
        Tagger { labels, keep, params }
    }

    pub fn from_parts(labels: Vec<String>, keep: Keep, params: ParamStore) -> Result<Self> {
        let a = params.require(TRANSITIONS)?;
        if a.shape() != [labels.len() + 2, labels.len() + 2] {
            return Err(Error::dim("tagger transitions", a.shape(), &[labels.len() + 2, labels.len() + 2]));
        }
        params.require(&format!("{EMISSION}.w_out"))?;
        Ok(Tagger { labels, keep, params })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn keep(&self) -> Keep {
        self.keep
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(&format!("{ENCODER}.fwd.w_ih")).map_or(0, |t| t.cols())
    }

    pub fn hidden(&self) -> usize {
        self.params.get(&format!("{ENCODER}.fwd.w_hh")).map_or(0, |t| t.cols())
    }

    pub fn crf(&self) -> CrfParams {
        CrfParams::from_tensor(self.params.get(TRANSITIONS).expect("transitions present").clone())
            .expect("validated at construction")
    }

    /// Records `P` for a sentence and returns its node.
    pub fn emissions<S: AsRef<str>>(&self, g: &mut Graph, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<Var> {
        let x = g.constant(emb.sentence_matrix(tokens)?);
        self.emissions_from(g, x)
    }

    pub fn emissions_from(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = bilstm_encode(g, &self.params, ENCODER, x)?;
        emission_scores(g, &self.params, EMISSION, h)
    }

    /// Label ids for gold tags; tags outside the inventory are an error.
    pub fn encode_tags<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.labels
                    .iter()
                    .position(|l| l == t.as_ref())
                    .ok_or_else(|| Error::Vocabulary { tag: t.as_ref().to_string() })
            })
            .collect()
    }

    /// CRF negative log-likelihood of `gold` recorded on `g`.
    pub fn loss<S: AsRef<str>>(&self, g: &mut Graph, emb: &EmbeddingMatrix, tokens: &[S], gold: &[usize]) -> Result<Var> {
        let p = self.emissions(g, emb, tokens)?;
        let a = g.param(&self.params, TRANSITIONS)?;
        crf::nll_node(g, p, a, gold)
    }

    /// Viterbi tags with the posterior marginals of the same CRF.
    pub fn decode<S: AsRef<str>>(&self, emb: &EmbeddingMatrix, tokens: &[S]) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.emissions(&mut g, emb, tokens)?;
        let p = g.value(p);
        let a = self.params.require(TRANSITIONS)?;
        let (path, _) = crf::viterbi(p, a)?;
        let marginals = crf::posterior_marginals(p, a)?;
        Prediction::new(path.iter().map(|&i| self.labels[i].clone()).collect(), path, marginals)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "tagger")
            .with_meta("keep", self.keep)
            .with_meta("labels", self.labels.join(" "))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "tagger" {
            return Err(Error::Checkpoint(format!("expected a tagger checkpoint, found {}", ck.meta("kind")?)));
        }
        let labels = ck.meta("labels")?.split(' ').map(str::to_string).collect();
        let keep = ck.meta("keep")?.parse()?;
        Self::from_parts(labels, keep, ck.params.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggerEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaggerLog {
    pub epochs: Vec<TaggerEpoch>,
    pub best_epoch: usize,
}

impl TaggerLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_weighted_f1\n");
        for e in &self.epochs {
            let f1 = e.val_f1.map_or_else(|| "undef".into(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, f1);
        }
        out
    }
}

/// Weighted F1 over the entity types of `gold` (O excluded).
pub fn validation_f1(tagger: &Tagger, emb: &EmbeddingMatrix, gold: &Corpus) -> Result<Option<f64>> {
    if gold.is_empty() {
        return Ok(None);
    }
    let preds = crate::parallel::try_map(&gold.sentences, |s| tagger.decode(emb, &s.surfaces()).map(|p| p.tags))?;
    let golds: Vec<Vec<&str>> = gold.sentences.iter().map(|s| s.tags()).collect();
    let entity_types: Vec<&str> = gold
        .tagset
        .type_names()
        .iter()
        .map(String::as_str)
        .filter(|t| *t != OUTSIDE)
        .collect();
    let report = report_sequences(&preds, &golds, &entity_types)?;
    Ok(report.weighted_over(&entity_types))
}

/// Trains on `train` masked to `keep`; the returned tagger is the epoch with
/// the best validation weighted F1 (earliest on ties).
pub fn train_tagger(
    train: &Corpus,
    val: &Corpus,
    keep: Keep,
    emb: &EmbeddingMatrix,
    config: &TrainConfig,
) -> Result<(Tagger, TaggerLog)> {
    config.validate()?;
    let (train, val) = match keep {
        Keep::All => (train.clone(), val.clone()),
        _ => (mask_labels(train, keep), mask_labels(val, keep)),
    };
    let labels = train.tagset.labels().to_vec();
    if labels.iter().all(|l| l == OUTSIDE) {
        return Err(Error::Config(format!("no entity labels left to learn for keep={keep}")));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tagger = Tagger::with_rng(labels, keep, emb.dim(), config.hidden, &mut rng);
    let k = tagger.labels.len();

    let examples: Vec<(crate::autodiff::Tensor, Vec<usize>)> = train
        .sentences
        .iter()
        .map(|s| Ok((emb.sentence_matrix(&s.surfaces())?, tagger.encode_tags(&s.tags())?)))
        .collect::<Result<_>>()?;

    let mut log = TaggerLog::default();
    let mut best: Option<(f64, Tagger)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (x, gold) = &examples[i];
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let p = tagger.emissions_from(&mut g, xv)?;
            let a = g.param(&tagger.params, TRANSITIONS)?;
            let loss = crf::nll_node(&mut g, p, a, gold)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    param: "loss".into(),
                    msg: format!("non-finite loss at epoch {epoch}, sentence {i}"),
                });
            }
            total += value;
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads, &tagger.params);
            sgd_step(&mut tagger.params, &pg, config.lr, config.clip)?;
            crf::mask_sentinels(tagger.params.get_mut(TRANSITIONS).expect("present"), k);
        }
        let loss = total / examples.len() as f64;
        let val_f1 = validation_f1(&tagger, emb, &val)?;
        log::info!("tagger[{keep}] epoch {epoch}: loss {loss:.5} val weighted F1 {val_f1:?}");
        log.epochs.push(TaggerEpoch { epoch, loss, val_f1 });
        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, tagger.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, tagger) = best.expect("at least one epoch");
    Ok((tagger, log))
}
